import csv

import pytest

from multiexit.cli import main
from multiexit.experiments import verify_manifest

TINY = """\
# tiny run for tests
data.n_train=300
data.n_val=150
data.n_test=150
data.input_dim=6
data.classes=3
model.block_widths=8,8,8
model.head_hidden=6
train.phase1_epochs=2
train.phase2_epochs=1
train.lr0=0.03
train.batch_size=50
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "c.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def trained(cfg_file, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "run1"
    assert main(["train", "--config", str(cfg_file), "--out", str(run)]) == 0
    return run


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_train_writes_checkpoint_log_manifest(trained):
    for name in ("model.ckpt", "train_log.csv", "config.txt", "manifest.json"):
        assert (trained / name).is_file()
    header = rows(trained / "train_log.csv")[0]
    assert header == ["epoch", "phase", "exit_index", "split", "accuracy", "loss", "grad_var_block1"]
    assert verify_manifest(trained) == []


def test_train_is_deterministic(cfg_file, trained, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "again")]) == 0
    for name in ("model.ckpt", "train_log.csv", "config.txt", "manifest.json"):
        assert (trained / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_eval_budget_row_count(trained):
    assert main(["eval-budget", "--run", str(trained), "--budgets", "100,200,400"]) == 0
    r = rows(trained / "budget.csv")
    assert r[0][:3] == ["budget", "avg_cost", "accuracy"] and len(r[0]) == 3 + 3
    assert len(r) == 1 + 3
    assert verify_manifest(trained) == []


def test_eval_anytime_and_calibrate(trained):
    assert main(["eval-anytime", "--run", str(trained)]) == 0
    assert len(rows(trained / "anytime.csv")) == 1 + 3
    assert main(["calibrate", "--run", str(trained), "--budget", "400"]) == 0
    t = rows(trained / "thresholds.csv")
    assert len(t) == 1 + 3 and float(t[-1][1]) == 0.0


def test_calibrate_infeasible_budget_fails(trained, capsys):
    assert main(["calibrate", "--run", str(trained), "--budget", "1"]) == 1
    assert "below the cheapest exit cost" in capsys.readouterr().err


def test_grad_variance(cfg_file, tmp_path):
    out = tmp_path / "gv"
    assert main(["grad-variance", "--config", str(cfg_file), "--out", str(out), "--steps", "30"]) == 0
    r = rows(out / "grad_variance.csv")
    assert r[0][:4] == ["block", "var_plain", "var_ge", "bound_2max"]
    assert len(r) == 1 + 3


def test_ablate_grid_shape(cfg_file, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_file), "--out", str(out), "--seeds", "1", "--quiet",
                 "--set", "train.phase1_epochs=1"]) == 0
    r = rows(out / "ablation.csv")
    assert len(r) == 1 + 8
    assert sum(h.startswith("acc_exit_") for h in r[0]) == 3
    assert {tuple(row[:3]) for row in r[1:]} == {(a, b, c) for a in "01" for b in "01" for c in "01"}
    assert verify_manifest(out) == []


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["train", "--config", "/nonexistent/c.cfg"],
    ["train", "--set", "train.nope=1"],
    ["train", "--set", "novalue"],
    ["eval-anytime", "--run", "/nonexistent/run"],
    ["eval-budget", "--run", "x", "--budgets", "3,1"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(argv + (["--out", str(tmp_path / "o")] if argv[0] == "train" else []))
    assert e.value.code == 2
