import re

import pytest

from forcevla.cli import main
from forcevla.dataset import read_manifest
from forcevla.policy import ConfigError, PolicyVariant
from forcevla.runconfig import parse_run_config, run_config_from_flat
from forcevla.sim import PerturbationMode

TINY = """\
[run]
mode = occlusion
demos = 3
seed = 1
trials = 4

[policy]
patch = 8
encoder_blocks = 1
suffix_heads = 2

[fusion]
d_model = 16
d_act = 8
n_heads = 2
d_head = 8
n_experts = 4
h_action = 4

[train]
steps = 5
batch_size = 8
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    runs = root / "runs"
    base = ["--runs-dir", str(runs)]
    assert main(base + ["collect", "--config", str(cfg), "--run-id", "data"]) == 0
    ds = runs / "data" / "dataset"
    assert main(base + ["train", "--config", str(cfg), "--dataset", str(ds),
                        "--run-id", "fv"]) == 0
    assert main(base + ["eval", "--run-id", "fv", "--mode", "occlusion",
                        "--mode", "nominal"]) == 0
    return root, cfg, runs, base, ds


# -- config --------------------------------------------------------------------------
def test_config_parse_and_flat_roundtrip():
    cfg = parse_run_config(TINY)
    assert cfg.mode is PerturbationMode.OCCLUSION and cfg.policy.fusion.d_model == 16
    assert cfg.train.steps == 5
    back = run_config_from_flat(cfg.to_flat())
    assert back.policy_config() == cfg.policy_config()
    assert back.train_config() == cfg.train_config()
    assert back.to_flat() == cfg.to_flat() and back.digest() == cfg.digest()


@pytest.mark.parametrize("text", ["[run]\nbogus = 1\n", "[extra]\na = 1\n",
                                  "[run]\nvariant = nope\n", "[fusion]\nn_heads = 3\n",
                                  "[train]\nsteps = many\n", "[run]\nmode = lunar\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 1\n")
    assert main(["--runs-dir", str(tmp_path), "collect", "--config", str(bad)]) == 2
    assert main(["--runs-dir", str(tmp_path), "collect", "--config",
                 str(tmp_path / "missing.ini")]) == 2


# -- collect -----------------------------------------------------------------------------
def test_collect_writes_dataset(pipeline):
    _, _, _, _, ds = pipeline
    m = read_manifest(ds)
    assert m["n_episodes"] == "3" and m["mode"] == "occlusion"
    assert len(list((ds / "insertion").glob("*.fvd"))) == 3


def test_collect_zero_demos(tmp_path, capsys):
    out = tmp_path / "empty"
    assert main(["collect", "--demos", "0", "--out", str(out)]) == 0
    m = read_manifest(out)
    assert m["n_episodes"] == "0" and m["episodes"] == ""


@pytest.mark.slow
def test_collect_fifty_nominal(tmp_path):
    out = tmp_path / "fifty"
    assert main(["collect", "--demos", "50", "--mode", "nominal", "--out", str(out)]) == 0
    m = read_manifest(out)
    assert m["n_episodes"] == "50" and len(m["episodes"].split(",")) == 50
    assert len(list((out / "insertion").glob("*.fvd"))) == 50


def test_collect_same_seed_same_hash(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["collect", "--demos", "2", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert read_manifest(tmp_path / "a")["hash"] == read_manifest(tmp_path / "b")["hash"]


def test_collect_refuses_overwrite(pipeline):
    _, cfg, runs, base, ds = pipeline
    assert main(base + ["collect", "--config", str(cfg), "--run-id", "data"]) == 2


# -- train ----------------------------------------------------------------------------------
def test_train_outputs(pipeline):
    _, _, runs, _, _ = pipeline
    run = runs / "fv"
    assert (run / "checkpoint.fvla").read_bytes()[:4] == b"FVLA"
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,loss,lr,grad_norm" and len(metrics) == 6
    m = dict(line.split(" = ", 1) for line in (run / "manifest.txt").read_text().splitlines())
    assert m["variant"] == "FVLMoE" and m["seed"] == "1" and len(m["dataset_hash"]) == 64
    assert m["run.mode"] == "occlusion" and m["fusion.n_experts"] == "4"


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["--runs-dir", str(tmp_path), "train", "--dataset",
                 str(tmp_path / "nowhere")]) == 3
    assert "nowhere" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_failure_exit(pipeline, tmp_path):
    _, _, _, _, ds = pipeline
    cfg = tmp_path / "hot.ini"
    cfg.write_text(TINY.replace("batch_size = 8", "batch_size = 8\nlr_peak = 1e300\n"
                                                  "lr_floor = 1e300\nclip = 1e300"))
    code = main(["--runs-dir", str(tmp_path), "train", "--config", str(cfg), "--dataset",
                 str(ds), "--run-id", "hot", "--steps", "10"])
    assert code == 4


# -- eval --------------------------------------------------------------------------------
def test_eval_logs_and_traces(pipeline):
    _, _, runs, _, _ = pipeline
    for mode in ("occlusion", "nominal"):
        d = runs / "fv" / "eval" / mode
        lines = (d / "episodes.csv").read_text().splitlines()
        assert lines[0].startswith("episode,seed,mode,success") and len(lines) == 5
        head = (d / "router_trace.csv").read_text().splitlines()[0]
        assert head == "episode,timestep,token,role,selected,p0,p1,p2,p3"


def test_eval_twenty_trials(pipeline):
    _, _, runs, base, _ = pipeline
    assert main(base + ["eval", "--run-id", "fv", "--mode", "unstable_socket",
                        "--trials", "20"]) == 0
    lines = (runs / "fv" / "eval" / "unstable_socket" / "episodes.csv").read_text().splitlines()
    assert len(lines) == 21


def test_eval_variant_mismatch(pipeline):
    _, _, _, base, _ = pipeline
    assert main(base + ["eval", "--run-id", "fv", "--variant", "NoForce", "--mode",
                        "height_shift"]) == 2


def test_eval_refuses_rerun(pipeline):
    _, _, _, base, _ = pipeline
    assert main(base + ["eval", "--run-id", "fv", "--mode", "occlusion"]) == 2


def test_eval_detects_tampered_checkpoint(pipeline, tmp_path):
    import shutil
    _, _, runs, _, _ = pipeline
    copy = tmp_path / "runs" / "fv"
    shutil.copytree(runs / "fv", copy)
    blob = bytearray((copy / "checkpoint.fvla").read_bytes())
    blob[-1] ^= 1
    (copy / "checkpoint.fvla").write_bytes(bytes(blob))
    assert main(["--runs-dir", str(tmp_path / "runs"), "eval", "--run-id", "fv",
                 "--mode", "object_variant"]) == 3


# -- analyze / plot ------------------------------------------------------------------------------
def test_analyze_and_plot(pipeline, capsys):
    _, _, runs, base, _ = pipeline
    assert main(base + ["analyze", "fv*", "--force"]) == 0
    out = runs / "fv" / "analysis"
    table = (out / "success_table.csv").read_text().splitlines()
    assert table[0].startswith("model,")
    assert table[1].startswith("FVLMoE,")
    svg = (out / "expert_load_FVLMoE_occlusion.svg").read_text()
    assert len(re.findall(r"<polyline\b", svg)) == 4
    assert len((out / "expert_load_FVLMoE_occlusion.csv").read_text().splitlines()) == 101
    assert main(base + ["plot", "fv", "--force"]) == 0
    plots = out / "plots"
    assert len(re.findall(r"<polyline\b",
                          (plots / "expert_load_FVLMoE_nominal.svg").read_text())) == 4
    assert (plots / "expert_load_FVLMoE_nominal.png").read_bytes()[:4] == b"\x89PNG"


def test_analyze_no_matching_runs(pipeline):
    _, _, _, base, _ = pipeline
    assert main(base + ["analyze", "zzz*"]) == 3


def test_noforce_has_no_traces(pipeline, tmp_path):
    _, cfg, _, _, ds = pipeline
    rd = ["--runs-dir", str(tmp_path)]
    assert main(rd + ["train", "--config", str(cfg), "--dataset", str(ds), "--variant",
                      "NoForce", "--run-id", "nf"]) == 0
    assert main(rd + ["eval", "--run-id", "nf", "--trials", "2"]) == 0
    assert not (tmp_path / "nf" / "eval" / "occlusion" / "router_trace.csv").exists()
    assert main(rd + ["plot", "nf"]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--max-entries", "4"]) == 0
    assert "all within" in capsys.readouterr().out


def test_variant_names_cover_all():
    assert {v.value for v in PolicyVariant} == {
        "NoForce", "ForceConcatState", "LinearBeforeVLM", "MoEBeforeVLM", "ConcatAfterVLM",
        "FVLMoE"}
