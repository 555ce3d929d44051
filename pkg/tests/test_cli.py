import json
import subprocess
import sys

import numpy as np
import pytest

from advbench.cli import main
from advbench.data import MultiLabelDataset, load_dataset, save_dataset
from advbench.models import load_model


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "gen.json"
    cfg.write_text(json.dumps({"n_train": 300, "n_test": 80, "affinity": "chain"}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--epochs", "1", "--out", str(root / "m.xrmw"), "--seed", "0"]) == 0
    return root


def test_gen_data_layout(work):
    names = sorted(p.name for p in (work / "data").iterdir())
    assert names == ["cooc.csv", "cooc_inverse.csv", "test.labels.csv", "test.xrds", "train.labels.csv", "train.xrds"]
    assert len(load_dataset(work / "data" / "test.xrds")) == 80


def test_gen_data_is_idempotent(work, tmp_path):
    cfg = work / "gen.json"
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--seed", "3"]) == 0
    for name in ("train.xrds", "test.xrds", "cooc.csv", "cooc_inverse.csv", "train.labels.csv"):
        assert (tmp_path / name).read_bytes() == (work / "data" / name).read_bytes()


def test_seed_falls_back_to_environment(work, tmp_path, monkeypatch):
    cfg = work / "gen.json"
    monkeypatch.setenv("ADVBENCH_SEED", "3")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "env")]) == 0
    assert (tmp_path / "env" / "test.xrds").read_bytes() == (work / "data" / "test.xrds").read_bytes()
    monkeypatch.setenv("ADVBENCH_SEED", "x")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "bad")]) == 1


def test_train_is_idempotent(work, tmp_path):
    assert main(["train", "--data", str(work / "data"), "--epochs", "1", "--out", str(tmp_path / "m.xrmw"), "--seed", "0"]) == 0
    assert (tmp_path / "m.xrmw").read_bytes() == (work / "m.xrmw").read_bytes()


def test_attack_eps_zero_is_identity(work, tmp_path):
    out = tmp_path / "adv.xrds"
    assert main(["attack", "--model", str(work / "m.xrmw"), "--data", str(work / "data"), "--eps", "0", "--steps", "3", "--out", str(out)]) == 0
    clean = load_dataset(work / "data" / "test.xrds")
    assert load_dataset(out).images.tobytes() == clean.images.tobytes()


def test_attack_fraction_eps_and_idempotence(work, tmp_path):
    args = ["attack", "--model", str(work / "m.xrmw"), "--data", str(work / "data"), "--eps", "1/255", "--steps", "2", "--random-start", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a.xrds")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.xrds")]) == 0
    assert (tmp_path / "a.xrds").read_bytes() == (tmp_path / "b.xrds").read_bytes()
    adv = load_dataset(tmp_path / "a.xrds").images.astype(np.float64)
    clean = load_dataset(work / "data" / "test.xrds").images
    assert np.abs(adv - clean).max() <= 1 / 255 + 1e-6


def test_targeted_attack_and_eval(work, tmp_path):
    adv = tmp_path / "t.xrds"
    cooc = str(work / "data" / "cooc_inverse.csv")
    assert main(["attack", "--model", str(work / "m.xrmw"), "--data", str(work / "data"), "--eps", "2/255", "--steps", "2", "--targeted", "--cooc", cooc, "--loss", "mse", "--out", str(adv)]) == 0
    out = tmp_path / "eval.csv"
    assert main(["eval", "--model", str(work / "m.xrmw"), "--adv", str(adv), "--data", str(work / "data"), "--metrics", "k_robust_acc,risk,mlacc,mse", "--k", "1,3", "--cooc", cooc, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "source_model,target_model,dataset,attack,eps,steps,loss,metric,k,value,direction"
    assert [l.split(",")[7] for l in lines[1:]] == ["k_robust_acc", "k_robust_acc", "risk", "mlacc", "mse"]


def test_eval_perfect_predictions_gives_100(work, tmp_path):
    model = load_model(work / "m.xrmw")
    clean = load_dataset(work / "data" / "test.xrds")
    top = model.logits(clean.images).argmax(axis=1)
    labels = np.zeros_like(clean.labels)
    labels[np.arange(len(top)), top] = 1
    save_dataset(MultiLabelDataset(clean.images, labels), tmp_path / "perfect.xrds")
    adv = tmp_path / "adv.xrds"
    assert main(["attack", "--model", str(work / "m.xrmw"), "--data", str(tmp_path / "perfect.xrds"), "--eps", "0", "--out", str(adv)]) == 0
    out = tmp_path / "e.csv"
    assert main(["eval", "--model", str(work / "m.xrmw"), "--adv", str(adv), "--data", str(tmp_path / "perfect.xrds"), "--k", "1", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].endswith(",k_robust_acc,1,100.0,up")


def test_plan_commands_and_report(work, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    plan = tmp_path / "plan.json"
    plan.write_text(
        json.dumps(
            {
                "models": {"m": str(work / "m.xrmw")},
                "datasets": {"chain": str(work / "data" / "test.xrds")},
                "cooc": {"chain": str(work / "data" / "cooc_inverse.csv")},
                "attacks": [{"kind": "pgd", "eps": "1/255", "steps": 2}],
                "sample_count": 64,
                "batch_size": 16,
                "k": [1],
                "grid": {"epsilon": "1/255", "steps": 2},
                "sweep": {"epsilons": ["1/255", "2/255"], "steps": [1, 2]},
            }
        )
    )
    for cmd in ("matrix", "grid", "sweep"):
        assert main([cmd, "--plan", str(plan), "--out", str(tmp_path / cmd)]) == 0, cmd
    assert (tmp_path / "matrix" / "transfer" / "report.csv").exists()
    assert (tmp_path / "grid" / "correlations.csv").exists()
    assert main(["grid", "--plan", str(plan), "--out", str(tmp_path / "grid2"), "--jobs", "3"]) == 0
    for name in ("report.csv", "report.md", "series.csv", "correlations.csv", "provenance.json"):
        assert (tmp_path / "grid" / name).read_bytes() == (tmp_path / "grid2" / name).read_bytes()
    assert main(["report", "--in", str(tmp_path / "sweep"), "--format", "md", "--out", str(tmp_path / "s.md")]) == 0
    assert "eps*255" in (tmp_path / "s.md").read_text()
    assert main(["report", "--in", str(tmp_path / "grid"), "--format", "csv", "--out", str(tmp_path / "g.csv")]) == 0
    assert (tmp_path / "g.csv").read_bytes() == (tmp_path / "grid" / "report.csv").read_bytes()
    assert main(["report", "--in", str(tmp_path / "matrix"), "--format", "md", "--out", str(tmp_path / "m.md")]) == 0


def test_config_file_defaults_and_override(work, tmp_path):
    cfg = tmp_path / "attack.json"
    cfg.write_text(json.dumps({"model": str(work / "m.xrmw"), "data": str(work / "data"), "eps": "1/255", "steps": 2}))
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "a.xrds")]) == 0
    assert main(["attack", "--config", str(cfg), "--eps", "0", "--out", str(tmp_path / "b.xrds")]) == 0
    clean = load_dataset(work / "data" / "test.xrds").images.tobytes()
    assert load_dataset(tmp_path / "b.xrds").images.tobytes() == clean
    assert load_dataset(tmp_path / "a.xrds").images.tobytes() != clean
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "c.xrds")]) == 1


def test_exit_codes(work, tmp_path, capsys):
    assert main(["attack", "--data", str(work / "data"), "--eps", "0", "--out", str(tmp_path / "x")]) == 1
    assert "--model" in capsys.readouterr().err
    assert main(["attack", "--model", str(work / "m.xrmw"), "--data", str(work / "data"), "--eps", "2", "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--data", str(tmp_path / "missing.xrds"), "--out", str(tmp_path / "m")]) == 2
    bad = tmp_path / "bad.xrmw"
    bad.write_bytes(b"garbage")
    assert main(["attack", "--model", str(bad), "--data", str(work / "data"), "--eps", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["matrix", "--plan", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "p.json").write_text(json.dumps({"models": {}, "datasets": {}}))
    assert main(["matrix", "--plan", str(tmp_path / "p.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_help_lists_units(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--eps", "--steps", "--alpha", "--loss", "--targeted", "--cooc", "--seed", "--out"):
        assert flag in out
    assert "[0,1] pixel scale" in out and "1/255" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "advbench.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "attack", "eval", "matrix", "grid", "sweep", "report"):
        assert cmd in proc.stdout
