import csv
import json

import pytest

from assemblypolicy import config as C
from assemblypolicy.cli import main, resolve_config

SKILLS = ["place-pad-red", "place-pad-blue"]
SMALL = {
    "preset": "tiny",
    "model": {"image_size": 16, "patch": 4, "channels": 8, "d_attn": 8, "heads": 2, "bins": 8, "max_len": 12},
    "moe": {"hidden": 8},
    "train": {"epochs": 2},
    "env": {"skills": SKILLS, "camera_size": 32, "demos_per_skill": 2, "max_steps": 3},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["demo-gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def test_train_outputs(run):
    root, _ = run
    names = sorted(p.name for p in (root / "run").iterdir())
    assert [n for n in names if n.endswith(".ckpt")] == ["epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt"]
    assert {"config.json", "loss.png", "train_log.jsonl"} <= set(names)
    log = (root / "run" / "train_log.jsonl").read_text().splitlines()
    # 2 skills x 2 demos x 5 keyframes = 20 examples, batch 8 -> 3 steps per epoch
    assert len(log) == 6 and json.loads(log[-1])["step"] == 6


def test_dataset_manifest(run):
    root, _ = run
    man = json.loads((root / "data" / "dataset.json").read_text())
    assert man["skills"] == SKILLS and all(len(v) == 2 for v in man["demos"].values())
    assert "env_hash" in man


def test_non_empty_output_refused(run, capsys):
    root, cfg = run
    assert main(["demo-gen", "--config", str(cfg), "--out", str(root / "data")]) == 2
    assert "not empty" in capsys.readouterr().err


def test_env_hash_mismatch_refused(run, tmp_path, capsys):
    root, _ = run
    other = dict(SMALL, env=dict(SMALL["env"], camera_size=40))
    cfg = tmp_path / "other.json"
    cfg.write_text(json.dumps(other))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 2
    assert "env hash" in capsys.readouterr().err


def test_eval_report(run, tmp_path, capsys):
    root, _ = run
    code = main(["eval", "--checkpoint", str(root / "run" / "final.ckpt"), "--cases", "2",
                 "--out", str(tmp_path / "ev")])
    assert code == 0
    table = capsys.readouterr().out
    assert all(s in table for s in SKILLS) and "average" in table
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert sorted(report["skills"]) == sorted(SKILLS)
    assert all(len(b["episodes"]) == 2 for b in report["skills"].values())
    rows = list(csv.DictReader(open(tmp_path / "ev" / "report.csv")))
    assert [r["skill"] for r in rows] == SKILLS + ["average"]
    assert (tmp_path / "ev" / "report.png").stat().st_size > 0


def test_eval_unknown_skill(run, tmp_path):
    root, _ = run
    assert main(["eval", "--checkpoint", str(root / "run" / "final.ckpt"), "--skills", "seat-socket-green",
                 "--out", str(tmp_path / "ev")]) == 2


def test_inspect_heatmaps(run, tmp_path):
    root, _ = run
    out = tmp_path / "insp"
    assert main(["inspect-heatmaps", "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--data", str(root / "data"), "--sample", "3", "--out", str(out)]) == 0
    assert len(list(out.glob("*.pgm"))) == 12
    rows = list(csv.DictReader(open(out / "routing.csv")))
    assert len(rows) == 2 * 2 * 1 * 4     # stages x layers x skills x experts
    assert {"step", "layer", "skill", "expert", "P_e", "F_e", "alpha_e"} <= set(rows[0])
    assert (out / "heatmaps.png").exists()
    assert json.loads((out / "sample.json").read_text())["sample"] == 3
    assert main(["inspect-heatmaps", "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--data", str(root / "data"), "--sample", "99", "--out", str(tmp_path / "x")]) == 2


def test_routing_stats(run, tmp_path):
    root, _ = run
    out = tmp_path / "rs"
    assert main(["routing-stats", "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--data", str(root / "data"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "routing.csv")))
    assert len(rows) == 2 * 2 * 2 * 4
    assert {r["step"] for r in rows} == {"6"}
    for stage in ("coarse", "fine"):
        for layer in ("0", "1"):
            for skill in SKILLS:
                f = [float(r["F_e"]) for r in rows if (r["stage"], r["layer"], r["skill"]) == (stage, layer, skill)]
                assert sum(f) == pytest.approx(1.0, abs=1e-5)
    assert (out / "routing.png").exists()


def test_resume_from_epoch(run, tmp_path):
    root, cfg = run
    out = tmp_path / "res"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out),
                 "--resume", str(root / "run" / "epoch_001.ckpt")]) == 0
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 3


def test_checkpoint_config_mismatch(run, tmp_path):
    root, _ = run
    assert main(["eval", "--checkpoint", str(root / "run" / "final.ckpt"), "--config", "tiny",
                 "--out", str(tmp_path / "ev")]) == 2


def test_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "ev")]) == 2


def test_config_resolution(tmp_path):
    assert resolve_config("tiny", seed=5).train.seed == 5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"preset": "tiny", "model": {"size": 3}}))
    with pytest.raises(C.ConfigError):
        resolve_config(str(bad))
    assert main(["demo-gen", "--config", "nonexistent", "--out", str(tmp_path / "d")]) == 2
