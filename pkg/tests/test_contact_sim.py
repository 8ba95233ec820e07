import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from forcevla.sim import (InsertionEnv, PerturbationMode, RandomPolicy, ReplayPolicy,
                          ScriptedExpert, SimConfig, SimError, WorldState, contact_wrench,
                          episode_seed, evaluate, find_contacts, is_success, rasterize,
                          render_views, rollout_expert)

CFG = SimConfig()


def state(x, y, theta=0.0, sx=0.0, sy=0.0, **kw):
    base = dict(x=x, y=y, theta=theta, grip=CFG.grip_width, socket_x=sx, socket_y=sy,
                anchor_x=sx, mouth_half_width=CFG.mouth_half_width, chamfer=CFG.chamfer,
                depth=CFG.depth, peg_half_width=CFG.peg_half_width)
    base.update(kw)
    return WorldState(**base)


def wrench_at(s, motion=(0.0, 0.0)):
    return contact_wrench(s, find_contacts(s, CFG), np.asarray(motion, float), CFG)


# -- contact model --------------------------------------------------------------------
def test_free_space_wrench_exactly_zero():
    env = InsertionEnv()
    s, obs = env.reset(0)
    assert np.array_equal(obs.wrench, np.zeros(6))
    s, obs = env.step(s, [0.001, -0.001, 0.0, CFG.grip_width])
    assert np.array_equal(obs.wrench, np.zeros(6))


def test_flat_wall_one_millimetre():
    # peg resting on the flat top of the left block, tip 1 mm below the surface
    s = state(x=-0.016, y=-0.001)
    w = wrench_at(s)
    oracle_fy = CFG.k_n * (0.0 - s.y)  # k_n * depth, normal +y
    assert oracle_fy == pytest.approx(2.0)
    assert w[1] == pytest.approx(oracle_fy, rel=1e-9)
    assert w[0] == pytest.approx(0.0, abs=1e-12)
    assert w[2:5].tolist() == [0.0, 0.0, 0.0]


def test_left_chamfer_pushes_toward_centre():
    # bottom-left corner of the peg inside the left chamfer, which runs from
    # (-w - c, 0) down to (-w, -c): solid side satisfies x + y + (w + c) < 0
    s = state(x=-0.0038, y=-0.001)
    corner = np.array([s.x - CFG.peg_half_width, s.y])
    depth = -(corner[0] + corner[1] + CFG.mouth_half_width + CFG.chamfer) / math.sqrt(2)
    w = wrench_at(s)
    assert w[0] > 0
    assert w[0] == pytest.approx(CFG.k_n * depth / math.sqrt(2), rel=1e-9)
    assert w[1] == pytest.approx(CFG.k_n * depth / math.sqrt(2), rel=1e-9)


def test_right_chamfer_mirrors_left():
    wl = wrench_at(state(x=-0.0038, y=-0.001))
    wr = wrench_at(state(x=0.0038, y=-0.001))
    assert wr[0] == pytest.approx(-wl[0], rel=1e-9)
    assert wr[1] == pytest.approx(wl[1], rel=1e-9)
    assert wr[5] == pytest.approx(-wl[5], rel=1e-9)


def test_friction_opposes_sliding():
    s = state(x=-0.016, y=-0.001)
    w = wrench_at(s, motion=(0.001, 0.0))
    assert w[0] == pytest.approx(-CFG.mu * 2.0, rel=1e-9)


def test_wrench_opposes_penetration():
    s = state(x=-0.016, y=-0.002)
    for c in find_contacts(s, CFG):
        assert c.normal[1] > 0


def test_quasi_static_wrench_constant():
    env = InsertionEnv()
    s = state(x=-0.016, y=-0.0004)
    walls = []
    for _ in range(5):
        s, obs = env.step(s, [0.0, 0.0, 0.0, CFG.grip_width])
        walls.append(obs.wrench)
    assert np.any(walls[0])
    for w in walls[1:]:
        np.testing.assert_array_equal(w, walls[0])


def test_nonfinite_action_rejected():
    env = InsertionEnv()
    s, _ = env.reset(0)
    with pytest.raises(SimError):
        env.step(s, [np.nan, 0, 0, 0])
    with pytest.raises(SimError):
        env.step(s, [0, 0])


def test_action_clamped():
    env = InsertionEnv()
    s, _ = env.reset(0)
    s2, _ = env.step(s, [1.0, 0.0, 0.0, CFG.grip_width])
    assert s2.x - s.x == pytest.approx(CFG.max_step_xy)


@given(st.integers(0, 10_000), st.lists(st.tuples(st.floats(-0.005, 0.005),
                                                  st.floats(-0.005, 0.003),
                                                  st.floats(-0.05, 0.05)),
                                        min_size=1, max_size=25))
def test_penetration_bounded(seed, moves):
    env = InsertionEnv()
    s, _ = env.reset(seed)
    for dx, dy, dth in moves:
        s, _ = env.step(s, [dx, dy, dth, CFG.grip_width])
        for c in find_contacts(s, CFG):
            assert c.depth <= CFG.max_penetration + 1e-9


def test_unstable_socket_moves_with_force():
    env = InsertionEnv(mode=PerturbationMode.UNSTABLE_SOCKET)
    s = state(x=-0.0038, y=-0.0005, anchor_stiffness=CFG.anchor_stiffness)
    s2, obs = env.step(s, [0.0, 0.0, 0.0, CFG.grip_width])
    assert obs.wrench[0] > 0
    assert s2.socket_x == pytest.approx(s.anchor_x - obs.wrench[0] / CFG.anchor_stiffness)


def test_replay_is_bit_exact():
    env = InsertionEnv(mode="occlusion")
    rng = np.random.default_rng(0)
    acts = rng.uniform(-0.003, 0.003, (30, 4))
    acts[:, 3] = CFG.grip_width

    def run():
        s, _ = env.reset(5)
        out = []
        for a in acts:
            s, o = env.step(s, a)
            out.append((s, o.wrench.tobytes(), o.base_view.tobytes()))
        return out
    assert run() == run()


def test_modes_parse_and_label():
    for m in PerturbationMode:
        assert PerturbationMode.parse(m.value) is m
        assert PerturbationMode.parse(m.label) is m
    with pytest.raises(ValueError):
        PerturbationMode.parse("earthquake")


def test_mode_reset_parameters():
    h, _ = InsertionEnv(mode="height_shift").reset(3)
    o, _ = InsertionEnv(mode="object_variant").reset(3)
    u, _ = InsertionEnv(mode="unstable_socket").reset(3)
    n, _ = InsertionEnv().reset(3)
    assert n.socket_y == 0.0 and h.socket_y != 0.0 and abs(h.socket_y) <= CFG.height_range
    assert o.peg_half_width == pytest.approx(CFG.peg_half_width * CFG.object_scale)
    assert math.isinf(n.anchor_stiffness) and u.anchor_stiffness == CFG.anchor_stiffness


# -- rendering --------------------------------------------------------------------------
def test_empty_scene_renders_zero():
    img = rasterize([], (0.0, 0.0), 0.08, 16, 4)
    assert img.shape == (16, 16) and not img.any()


def test_grids_in_unit_interval():
    s, obs = InsertionEnv().reset(1)
    for g in (obs.base_view, obs.wrist_view):
        assert g.shape == (16, 16) and g.min() >= 0.0 and g.max() <= 1.0 and g.max() > 0


def test_occlusion_hides_socket_position():
    s1 = state(x=0.0, y=0.03, sx=-0.004)
    s2 = state(x=0.0, y=0.03, sx=0.004)
    b1, _ = render_views(s1, CFG, PerturbationMode.OCCLUSION)
    b2, _ = render_views(s2, CFG, PerturbationMode.OCCLUSION)
    n1, _ = render_views(s1, CFG, PerturbationMode.NOMINAL)
    n2, _ = render_views(s2, CFG, PerturbationMode.NOMINAL)
    assert not np.array_equal(n1, n2)
    np.testing.assert_array_equal(b1, b2)


def test_occlusion_leaves_wrench_alone():
    s = state(x=-0.0038, y=-0.0004)
    a = [0.0, -0.001, 0.0, CFG.grip_width]
    _, on = InsertionEnv(mode="nominal").step(s, a)
    _, oo = InsertionEnv(mode="occlusion").step(s, a)
    np.testing.assert_array_equal(on.wrench, oo.wrench)
    assert not np.array_equal(on.base_view, oo.base_view)


def test_wrist_view_recentres():
    a = state(x=0.001, y=0.01, sx=0.0)
    d = 0.0025
    b = state(x=0.001 + d, y=0.01 + d, sx=d, sy=d)
    _, wa = render_views(a, CFG, PerturbationMode.NOMINAL)
    _, wb = render_views(b, CFG, PerturbationMode.NOMINAL)
    np.testing.assert_allclose(wa, wb, atol=1e-12)


# -- expert --------------------------------------------------------------------------------
def test_expert_stops_when_inserted():
    s = state(x=0.0, y=-CFG.depth)
    a = ScriptedExpert()(s, InsertionEnv().observe(s, np.zeros(6)))
    np.testing.assert_array_equal(a[:3], 0.0)


def test_expert_follows_lateral_force():
    s = state(x=-0.003, y=-0.002)
    obs = InsertionEnv().observe(s, np.array([1.0, 2.0, 0, 0, 0, 0]))
    assert ScriptedExpert(privileged=False)(s, obs)[0] > 0
    obs = InsertionEnv().observe(s, np.array([-1.0, 2.0, 0, 0, 0, 0]))
    assert ScriptedExpert(privileged=False)(s, obs)[0] < 0


@pytest.mark.slow
def test_expert_nominal_success_rate():
    env = InsertionEnv()
    wins = sum(rollout_expert(env, episode_seed(0, i))[3] for i in range(100))
    assert wins >= 95


# -- evaluation ---------------------------------------------------------------------------
def test_success_boundary_closed():
    s = state(x=0.0, y=-(CFG.success_depth_frac * CFG.depth))
    assert is_success(s, CFG)
    assert not is_success(replace(s, y=s.y + 1e-9), CFG)
    assert is_success(replace(s, x=CFG.mouth_half_width), CFG)


def test_random_policy_floor():
    res = evaluate(RandomPolicy(0), "nominal", 20, seed=0)
    assert res.success_rate <= 0.05


def test_replaying_expert_reproduces_success():
    env = InsertionEnv(mode="occlusion")
    seqs, outcomes = [], []
    for i in range(4):
        _, _, actions, ok = rollout_expert(env, episode_seed(0, i))
        seqs.append(np.array(actions))
        outcomes.append((ok, len(actions)))
    res = evaluate(ReplayPolicy(seqs), "occlusion", 4, seed=0)
    assert [(e.success, e.steps) for e in res.episodes] == outcomes


def test_torque_limit_failure_reported():
    cfg = replace(CFG, torque_limit=1e-6)
    env = InsertionEnv(cfg, "height_shift")
    blind = ScriptedExpert(cfg, privileged=False)
    seqs, touched = [], []
    for i in range(4):
        states, obs, actions, _ = rollout_expert(env, episode_seed(0, i), blind)
        seqs.append(np.array(actions))
        touched.append(any(abs(o.wrench[5]) > 1e-6 for o in obs))
    assert any(touched)
    res = evaluate(ReplayPolicy(seqs), "height_shift", 4, seed=0, config=cfg)
    for e, t in zip(res.episodes, touched):
        assert (e.failure_reason == "torque_limit") == t
        if t:
            assert not e.success
