from dataclasses import replace

import numpy as np
import pytest

from forcevla import tensor as T
from forcevla.policy import (ConfigError, FlowPolicy, NumericalFailure, PolicyConfig,
                             PolicyVariant, TrainConfig, checkpoint_bytes, patchify, restore,
                             train)
from forcevla.policy.toy import bimodal_data, blank_batch, toy_config
from forcevla.tensor import ShapeError, Tensor, decode_checkpoint


def tiny(variant=PolicyVariant.FVLMOE, seed=0, horizon=2):
    cfg = toy_config(seed)
    return replace(cfg, variant=variant, fusion=replace(cfg.fusion, h_action=horizon),
                   state_dim=2, action_dim=2)


def random_batch(cfg, n, seed):
    rng = np.random.default_rng(seed)
    b = blank_batch(rng.integers(0, cfg.n_instructions, n), cfg)
    b.base[...] = rng.random(b.base.shape)
    b.wrist[...] = rng.random(b.wrist.shape)
    b.state[...] = rng.standard_normal(b.state.shape)
    b.wrench[...] = rng.standard_normal(b.wrench.shape)
    return b


def chunk_of(cfg, n, seed):
    return np.random.default_rng(seed).standard_normal((n, cfg.horizon, cfg.action_dim))


# -- context ------------------------------------------------------------------------
def test_token_count_desk_default():
    cfg = PolicyConfig()
    assert cfg.patches_per_view == 16 and cfg.n_vl == 33
    assert replace(cfg, variant=PolicyVariant.LINEAR_BEFORE_VLM).n_vl == 34


def test_grid_patch_mismatch():
    with pytest.raises(ConfigError):
        PolicyConfig(grid=16, patch=5)
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 6, 6)), 4)


def test_patchify_row_major():
    g = np.arange(16.0).reshape(1, 4, 4)
    p = patchify(g, 2)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 3], [10, 11, 14, 15])


def test_context_deterministic():
    cfg = tiny()
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 3, 0)
    np.testing.assert_array_equal(m.encode_context(b).e_vl.data, m.encode_context(b).e_vl.data)


def test_masking_changes_only_overlapping_patch_tokens():
    cfg = replace(PolicyConfig(), variant=PolicyVariant.NO_FORCE)
    m = FlowPolicy(cfg)
    rng = np.random.default_rng(0)
    grids = rng.random((1, 16, 16))
    masked = grids.copy()
    masked[0, 5:7, 9:14] = 0.0  # rows in patch-row 1, columns across patch-cols 2 and 3
    b0 = blank_batch(np.array([0]), cfg)
    b1 = blank_batch(np.array([0]), cfg)
    b0.base[...] = patchify(grids, 4)
    b1.base[...] = patchify(masked, 4)
    t0 = m.vlm.input_tokens(b0).data[0]
    t1 = m.vlm.input_tokens(b1).data[0]
    changed = set(np.nonzero(np.abs(t0 - t1).max(-1) > 0)[0])
    assert changed == {1 * 4 + 2, 1 * 4 + 3}


# -- suffix --------------------------------------------------------------------------
def test_swish_mlp_zero_input_gives_bias_path():
    m = FlowPolicy(tiny())
    mlp = m.suffix.action_time_mlp
    mlp.fc2.bias.data[...] = 0.3
    out = mlp(Tensor(np.zeros((1, 2 * m.cfg.d_act))))
    np.testing.assert_array_equal(out.data, 0.3)


def test_time_embedding_endpoints_differ():
    m = FlowPolicy(tiny())
    e = m.suffix.time_embedding(np.array([0.0, 1.0]), 1)[:, 0]
    half = e.shape[1] // 2
    assert np.all((e[0, :half] != e[1, :half]) | (e[0, half:] != e[1, half:]))


def test_suffix_reduces_to_action_tokens_without_attention_and_mlp():
    cfg = tiny()
    m = FlowPolicy(cfg)
    m.suffix.attn.zero_()
    m.suffix.mlp.zero_()
    b = random_batch(cfg, 2, 1)
    a = chunk_of(cfg, 2, 2)
    tau = np.array([0.3, 0.7])
    cond = m.condition(b)
    s = m.build_suffix(cond, Tensor(a), tau)
    np.testing.assert_allclose(s.data, m.suffix.action_tokens(Tensor(a), tau).data, atol=1e-15)


# -- variants ---------------------------------------------------------------------------
@pytest.mark.parametrize("variant", list(PolicyVariant))
def test_every_variant_runs(variant):
    cfg = tiny(variant)
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 3, 0)
    v = m.predict_velocity(b, chunk_of(cfg, 3, 1), 0.5)
    assert v.shape == (3, cfg.horizon, cfg.action_dim)
    assert np.isfinite(v.data).all()


def test_zeroed_fusion_equals_noforce_exactly():
    fv = FlowPolicy(tiny(PolicyVariant.FVLMOE))
    nf = FlowPolicy(tiny(PolicyVariant.NO_FORCE))
    fv.fvlmoe.zero_()
    b = random_batch(fv.cfg, 4, 3)
    a = chunk_of(fv.cfg, 4, 4)
    np.testing.assert_array_equal(fv.predict_velocity(b, a, 0.4).data,
                                  nf.predict_velocity(b, a, 0.4).data)


@pytest.mark.parametrize("variant,invariant", [
    (PolicyVariant.NO_FORCE, True), (PolicyVariant.FORCE_CONCAT_STATE, False),
    (PolicyVariant.LINEAR_BEFORE_VLM, False), (PolicyVariant.MOE_BEFORE_VLM, False),
    (PolicyVariant.CONCAT_AFTER_VLM, False), (PolicyVariant.FVLMOE, False)])
def test_force_sensitivity(variant, invariant):
    cfg = tiny(variant)
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 2, 5)
    a = chunk_of(cfg, 2, 6)
    v0 = m.predict_velocity(b, a, 0.5).data
    b.wrench[...] += 3.0
    v1 = m.predict_velocity(b, a, 0.5).data
    assert np.array_equal(v0, v1) == invariant


def test_variant_parse():
    assert PolicyVariant.parse("fvlmoe") is PolicyVariant.FVLMOE
    assert PolicyVariant.parse("concat_after_vlm") is PolicyVariant.CONCAT_AFTER_VLM
    with pytest.raises(ConfigError):
        PolicyVariant.parse("bogus")


# -- flow matching ------------------------------------------------------------------------
def test_fm_loss_uses_linear_interpolant():
    cfg = tiny()
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 3, 7)
    a1, a0 = chunk_of(cfg, 3, 8), chunk_of(cfg, 3, 9)
    for tau in (0.0, 1.0, 0.25):
        t = np.full(3, tau)
        expected = m.predict_velocity(b, tau * a1 + (1 - tau) * a0, t).data
        ref = np.mean((expected - (a1 - a0)) ** 2)
        assert m.fm_loss(b, a1, t, a0).item() == pytest.approx(ref, rel=1e-12)


def test_fm_loss_zero_for_exact_velocity():
    cfg = tiny()
    m = FlowPolicy(cfg)
    m.out_proj.zero_()
    b = random_batch(cfg, 2, 1)
    a0 = chunk_of(cfg, 2, 2)
    c = np.zeros_like(a0)  # constant zero field -> target a1 - a0 = 0 when a1 = a0
    assert m.fm_loss(b, a0 + c, np.array([0.2, 0.9]), a0).item() == 0.0


def test_fm_loss_horizon_mismatch():
    cfg = tiny()
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 1, 0)
    with pytest.raises(ShapeError):
        m.fm_loss(b, np.zeros((1, 5, 2)), np.array([0.5]), np.zeros((1, 5, 2)))


@pytest.mark.parametrize("n_steps", [1, 3, 10])
def test_constant_field_euler_exact(n_steps):
    cfg = tiny()
    m = FlowPolicy(cfg)
    m.out_proj.weight.data[...] = 0.0
    m.out_proj.bias.data[...] = np.array([0.5, -1.25])
    a0 = chunk_of(cfg, 2, 3)
    b = random_batch(cfg, 2, 4)
    a = m.sample_actions(b, np.random.default_rng(0), n_steps=n_steps, a0=a0)
    np.testing.assert_allclose(a, a0 + np.array([0.5, -1.25]), rtol=0, atol=1e-14)


def test_sampling_deterministic_for_seed():
    cfg = tiny()
    m = FlowPolicy(cfg)
    b = random_batch(cfg, 2, 4)
    a = m.sample_actions(b, np.random.default_rng(11))
    np.testing.assert_array_equal(a, m.sample_actions(b, np.random.default_rng(11)))


# -- training ----------------------------------------------------------------------------
def test_zero_steps_keeps_initialization():
    cfg = toy_config(0)
    m = FlowPolicy(cfg)
    before = m.state_dict()
    res = train(m, bimodal_data(cfg, 16), TrainConfig(steps=0))
    assert res.metrics == []
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_fixed_noise_loss_non_increasing():
    cfg = toy_config(0)
    m = FlowPolicy(cfg)
    res = train(m, bimodal_data(cfg, 64), TrainConfig(steps=200, batch_size=16),
                fixed_noise=True)
    loss = np.array([r[1] for r in res.metrics])
    assert len(loss) == 200
    assert np.diff(loss).max() <= 0.01 * loss[0]
    assert loss[-1] < 1e-3 * loss[0]


def test_identical_seeds_identical_metric_logs():
    def run():
        cfg = toy_config(3)
        return train(FlowPolicy(cfg), bimodal_data(cfg, 32),
                     TrainConfig(steps=20, batch_size=8, seed=3)).metrics_csv()
    a = run()
    assert a.splitlines()[0] == "step,loss,lr,grad_norm"
    assert a == run()


def test_nan_loss_names_step():
    cfg = toy_config(0)
    data = bimodal_data(cfg, 16)
    data.chunks[0, 0, 0] = np.nan
    with pytest.raises(NumericalFailure) as exc:
        train(FlowPolicy(cfg), data, TrainConfig(steps=50, batch_size=16))
    assert "step" in str(exc.value)


def test_checkpoint_restore_roundtrip():
    cfg = tiny(PolicyVariant.CONCAT_AFTER_VLM)
    m = FlowPolicy(cfg)
    data = bimodal_data(toy_config(0), 8)
    blob = checkpoint_bytes(m, data.norm)
    m2, norm = restore(decode_checkpoint(blob), cfg)
    b = random_batch(cfg, 2, 0)
    a = chunk_of(cfg, 2, 1)
    np.testing.assert_array_equal(m.predict_velocity(b, a, 0.3).data,
                                  m2.predict_velocity(b, a, 0.3).data)
    np.testing.assert_array_equal(norm.action_mean, data.norm.action_mean)
    with pytest.raises(Exception):
        restore(decode_checkpoint(blob), replace(cfg, variant=PolicyVariant.FVLMOE))
