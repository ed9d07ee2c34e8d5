import json
from pathlib import Path

import pytest

from egomap.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from egomap.config import ConfigError, content_hash, dump_config, load_config
from egomap.training import TrainConfig

REPO = Path(__file__).resolve().parents[1]
TINY = ["--set", "n_envs=2", "--set", "rollout=4", "--set", "n_test_configs=2", "--set", "t_max=20",
        "--eval-every", "0"]


def test_shipped_config_is_the_default():
    assert load_config(REPO / "configs" / "desk.yaml") == TrainConfig()


def test_paper_defaults_section_round_trips(tmp_path):
    cfg = TrainConfig(lr=1e-3, agent="baseline")
    text = dump_config(cfg)
    assert text.startswith("paper_defaults:")
    path = tmp_path / "c.yaml"
    path.write_text(text)
    assert load_config(path) == cfg


def test_environment_then_explicit_overrides():
    env = {"EGOMAP_LR": "0.001", "EGOMAP_ABLATIONS": "no-query,metric=l1", "EGOMAP_N_ENVS": "8"}
    cfg = load_config(None, {"n_envs": "4"}, environ=env)
    assert cfg.lr == 0.001 and cfg.ablations == ["no-query", "metric=l1"] and cfg.n_envs == 4
    assert load_config(None, {"total_frames": 5e6}, environ={}).total_frames == 5_000_000


@pytest.mark.parametrize("overrides, field", [
    ({"gamma": "abc"}, "gamma"),
    ({"n_envs": 2.5}, "n_envs"),
    ({"lr": -1}, "lr"),
    ({"wings": 2}, "wings"),
    ({"ablations": ["no-brain"]}, "toggle"),
])
def test_config_errors_name_the_field(overrides, field):
    with pytest.raises(ConfigError, match=field):
        load_config(None, overrides, environ={})


def test_content_hash_tracks_config():
    assert content_hash(TrainConfig()) == content_hash(TrainConfig())
    assert content_hash(TrainConfig(lr=1e-3)) != content_hash(TrainConfig())
    assert len(content_hash(TrainConfig())) == 40


def test_bad_config_exits_2(tmp_path, capsys):
    assert main(["train", "--set", "gamma=abc", "--runs-dir", str(tmp_path)]) == EXIT_CONFIG
    assert "gamma" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("paper_defaults: [1, 2]\n")
    assert main(["train", "--config", str(bad), "--runs-dir", str(tmp_path)]) == EXIT_CONFIG


def test_train_writes_run_layout_and_resumes(tmp_path, capsys):
    args = ["train", "--agent", "egomap", "--frames", "96", "--runs-dir", str(tmp_path), "--name", "r"] + TINY
    assert main(args) == EXIT_OK
    run = tmp_path / "r"
    for entry in ("manifest.json", "metrics.csv", "checkpoints", "figures", "replays", "summary.json"):
        assert (run / entry).exists(), entry
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config_hash"] == content_hash(load_config(run / "config.yaml"))
    rows = (run / "metrics.csv").read_text().splitlines()
    # a second invocation reuses the finished seed instead of retraining
    assert main(args) == EXIT_OK
    assert (run / "metrics.csv").read_text().splitlines() == rows
    assert main(args[:-len(TINY)] + ["--set", "lr=0.1"] + TINY) == EXIT_CONFIG


def test_evaluate_and_robustness(tmp_path, capsys):
    main(["train", "--agent", "baseline", "--frames", "32", "--runs-dir", str(tmp_path), "--name", "b"] + TINY)
    ckpt = tmp_path / "b" / "checkpoints" / "seed_0" / "final.npz"
    out = tmp_path / "eval.json"
    params = '{"t_max": 20}'
    assert main(["evaluate", str(ckpt), "--limit", "2", "--params", params, "--json", str(out)]) == EXIT_OK
    assert len(json.loads(out.read_text())["returns"]) == 2
    table = tmp_path / "robust.md"
    assert main(["robustness", str(ckpt), "--limit", "1", "--sigmas", "0", "0.1", "--out", str(table)]) == EXIT_OK
    assert len(table.read_text().splitlines()) == 4


def test_ablate_rejects_unknown_toggle(tmp_path):
    assert main(["ablate", "--toggles", "no-brain", "--runs-dir", str(tmp_path)]) == EXIT_CONFIG


def test_ablate_empty_toggle_set_is_plain_egomap(tmp_path, capsys):
    assert main(["ablate", "--toggles", "--frames", "32", "--runs-dir", str(tmp_path), "--name", "a"] + TINY) == 0
    table = (tmp_path / "a" / "ablation.md").read_text().splitlines()
    assert len(table) == 3 and table[2].startswith("| EgoMap |")


def _fake_summary(path: Path, mean, std):
    path.mkdir(parents=True)
    (path / "summary.json").write_text(json.dumps({
        "agent": path.name, "ablations": [], "noise_sigma": 0.0, "train_mean": mean, "train_std": std,
        "test_mean": mean, "test_std": std}))


def test_compare_enforces_ordering(tmp_path, capsys):
    _fake_summary(tmp_path / "egomap", 0.5, 0.1)
    _fake_summary(tmp_path / "baseline", 0.3, 0.05)
    _fake_summary(tmp_path / "close", 0.45, 0.05)
    assert main(["compare", str(tmp_path / "egomap"), str(tmp_path / "baseline"), "--require-order"]) == EXIT_OK
    assert main(["compare", str(tmp_path / "egomap"), str(tmp_path / "close"), "--require-order"]) == EXIT_CHECK
    assert main(["compare", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_gradcheck_diffcore_scope(capsys):
    assert main(["gradcheck", "--scope", "diffcore", "--instances", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out


def test_visualize_outputs(tmp_path, capsys):
    main(["train", "--agent", "egomap", "--frames", "32", "--runs-dir", str(tmp_path), "--name", "v"] + TINY)
    ckpt = tmp_path / "v" / "checkpoints" / "seed_0" / "final.npz"
    figs = tmp_path / "figs"
    assert main(["visualize", "--checkpoint", str(ckpt), "--max-steps", "6", "--out", str(figs)]) == EXIT_OK
    names = sorted(p.name for p in figs.glob("*.png"))
    assert "degradation_strip.png" in names and sum(n.startswith("triptych") for n in names) == 4
    assert main(["visualize", "--out", str(figs)]) == EXIT_CONFIG
    base = tmp_path / "b"
    main(["train", "--agent", "baseline", "--frames", "32", "--runs-dir", str(tmp_path), "--name", "b"] + TINY)
    assert main(["visualize", "--checkpoint", str(base / "checkpoints/seed_0/final.npz"),
                 "--out", str(figs)]) == EXIT_CONFIG
