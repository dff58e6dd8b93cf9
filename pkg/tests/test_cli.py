import csv
import hashlib
import json

import numpy as np
import pytest

from cpmt.cli import SELF_FOCUSED, TOKEN_FOCUSED, main, slot_type

MODEL = {"d_model": 8, "num_heads": 2, "K_segments": 2, "k_slots": 4, "cpa_layers": 1, "mem_layers": 1,
         "behavior_dim": 8, "modality_dims": {"audio": 4, "video": 4}}


def _gen(out, *extra):
    return main(["generate", "--out", str(out), "--n-fragments", "30", "--T", "8", "--d-a", "4", "--d-v", "4",
                 "--lag", "2", "--segments", "2", "--groups", "6", *extra])


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _gen(root / "data") == 0
    cfg = {"model": MODEL, "train": {"batch_size": 8, "epochs": 2, "gamma": 2.0},
           "data": {"manifest": "data", "test_frac": 0.2}}
    (root / "run.json").write_text(json.dumps(cfg))
    return root


@pytest.fixture(scope="module")
def trained(synth):
    assert main(["train", str(synth / "run.json"), "--out", str(synth / "runs"), "--seeds", "1,2,3"]) == 0
    return synth / "runs"


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generate_prints_counts_and_is_reproducible(tmp_path, capsys):
    assert _gen(tmp_path / "a", "--seed", "5") == 0
    text = capsys.readouterr().out
    assert "manifest:" in text and "none: 10" in text
    assert _gen(tmp_path / "b", "--seed", "5") == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _gen(tmp_path / "a") == 3
    assert _gen(tmp_path / "a", "--force") == 0


def test_generate_bad_arguments(tmp_path):
    assert _gen(tmp_path / "x", "--balance", "0.5,0.6,-0.1") == 3
    assert _gen(tmp_path / "y", "--rho", "1.5") == 2


def test_train_writes_rows_and_mean_std(trained):
    with open(trained / "summary.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows] == ["run", "seed1", "seed2", "seed3", "mean±std"]
    echoed = json.loads((trained / "config.json").read_text())
    assert echoed["model"]["d_model"] == 8 and echoed["model"]["ablations"]["no_memory"] is False
    cell = trained / "seed1" / "fold0"
    for name in ("last.ckpt", "best.ckpt", "test_predictions.json", "loss_curve.json", "split.json"):
        assert (cell / name).exists()


def test_train_echoes_ablation_and_refuses_reuse(synth):
    out = synth / "abl"
    assert main(["train", str(synth / "run.json"), "--out", str(out), "--ablation", "no_memory",
                 "--set", "train.epochs=1"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["model"]["ablations"]["no_memory"] is True and echoed["train"]["epochs"] == 1
    assert main(["train", str(synth / "run.json"), "--out", str(out)]) == 2


def test_train_resume_reproduces_run(synth):
    full, part = synth / "full", synth / "part"
    base = ["train", str(synth / "run.json"), "--seeds", "4", "--set", "train.epochs=3"]
    assert main(base + ["--out", str(full)]) == 0
    assert main(["train", str(synth / "run.json"), "--seeds", "4", "--set", "train.epochs=1", "--out", str(part)]) == 0
    assert main(base + ["--out", str(part), "--resume"]) == 0
    curve = lambda d: json.loads((d / "seed4" / "fold0" / "loss_curve.json").read_text())["loss_curve"]  # noqa: E731
    assert curve(full) == curve(part)
    assert (full / "summary.csv").read_text() == (part / "summary.csv").read_text()


def test_train_config_errors(synth, tmp_path):
    assert main(["train", str(synth / "run.json"), "--out", str(tmp_path / "r1"), "--set", "model.bogus=1"]) == 2
    assert main(["train", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r2")]) == 2
    assert main(["train", str(synth / "run.json"), "--out", str(tmp_path / "r3"), "--folds", "99"]) == 2


def test_eval_matches_training_report(trained, capsys):
    cell = trained / "seed1" / "fold0"
    capsys.readouterr()
    assert main(["eval", str(cell / "best.ckpt"), "--manifest", str(trained.parent / "data"),
                 "--split", "test"]) == 0
    report = json.loads(capsys.readouterr().out)
    saved = json.loads((cell / "test_report.json").read_text())
    assert report["macro_f1"] == pytest.approx(saved["macro_f1"])
    assert report["confusion"] == saved["confusion"]


def test_eval_bootstrap_against_itself(trained, tmp_path, capsys):
    cell = trained / "seed1" / "fold0"
    assert main(["eval", str(cell / "best.ckpt"), "--manifest", str(trained.parent / "data"),
                 "--bootstrap", str(cell / "test_predictions.json"), "--B", "200", "--out",
                 str(tmp_path / "e.json")]) == 0
    boot = json.loads((tmp_path / "e.json").read_text())["bootstrap"]
    assert boot["p_value"] == 1.0 and boot["significant"] is False


def test_eval_missing_inputs(trained, tmp_path):
    data = str(trained.parent / "data")
    assert main(["eval", str(tmp_path / "none.ckpt"), "--manifest", data]) == 3
    cell = trained / "seed1" / "fold0"
    assert main(["eval", str(cell / "best.ckpt"), "--manifest", data, "--bootstrap",
                 str(tmp_path / "none.json")]) == 3


def test_slot_type_thresholds():
    assert slot_type(0.95) == "type-1 (self-focused)"
    assert slot_type(SELF_FOCUSED) == "type-2 (partial)"
    assert slot_type(0.5) == "type-2 (partial)"
    assert slot_type(TOKEN_FOCUSED) == "type-2 (partial)"
    assert slot_type(0.02) == "type-3 (token-focused)"


def test_inspect_dump(trained, tmp_path):
    cell = trained / "seed2" / "fold0"
    out = tmp_path / "dump"
    assert main(["inspect", str(cell / "best.ckpt"), "--manifest", str(trained.parent / "data"),
                 "--fragment", "f00003", "--dump", str(out), "--direction", "V->A"]) == 0
    side = json.loads((out / "slots.json").read_text())
    assert side["memory_enabled"] and len(side["slots"]) == 2 * 4
    for s in side["slots"]:
        assert s["type"] == slot_type(s["self_weight"])
    for stem in side["files"]:
        assert (out / f"{stem}.csv").exists() and (out / f"{stem}.svg").exists()
    with open(out / "memory_write_step1.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "self"
    np.testing.assert_allclose(np.array(rows[1:], float).sum(axis=1), 1.0, atol=1e-6)
    assert any(s.startswith("crossmodal_self_VtoA") for s in side["files"])


def test_inspect_bad_selectors(trained, tmp_path, capsys):
    args = ["inspect", str(trained / "seed1" / "fold0" / "best.ckpt"), "--manifest", str(trained.parent / "data"),
            "--fragment", "f00000", "--dump", str(tmp_path / "d")]
    assert main(args + ["--direction", "X->Y"]) == 2
    assert "A->V" in capsys.readouterr().err
    assert main(args + ["--layer", "5"]) == 2
    assert main([a if a != "f00000" else "nope" for a in args]) == 3


def test_plot_outputs(trained, capsys):
    assert main(["plot", str(trained)]) == 0
    assert (trained / "loss_curve.svg").read_text().lstrip().startswith("<?xml")
    with open(trained / "per_class_f1.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["class", "f1_mean", "f1_std", "runs"]
    assert [r[0] for r in rows[1:]] == ["none", "other-follows-self", "self-follows-other"]
    assert all(r[3] == "3" for r in rows[1:])
    assert (trained / "per_class_f1.svg").exists()


def test_plot_empty_dir(tmp_path):
    assert main(["plot", str(tmp_path)]) == 3
