import json
import subprocess
import sys

import pytest

from dropbp.cli import main

TINY_TRAIN = {
    "model": {"n_units": 1, "d_model": 8, "d_ff": 16, "n_heads": 2, "seq_len": 8},
    "dataset": {"seq_len": 8, "alphabet": 4, "n_val": 16},
    "total_iters": 10,
    "batch_size": 4,
    "eval_every": 5,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_TRAIN))
    return path


def test_train_and_compare_logs(config_file, tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for log in (a, b):
        assert main(["train", "--config", str(config_file), "--method", "dropbp", "--p-avg", "0.5", "--log", str(log)]) == 0
    assert "final val loss" in capsys.readouterr().out
    assert main(["compare-logs", str(a), str(b)]) == 0
    assert main(["train", "--config", str(config_file), "--seed", "1", "--log", str(b)]) == 0
    assert main(["compare-logs", str(a), str(b)]) == 1


def test_train_override(config_file, tmp_path):
    log = tmp_path / "l.jsonl"
    assert main(["train", "--config", str(config_file), "--override", "total_iters=4", "--log", str(log)]) == 0
    assert sum(json.loads(x)["kind"] == "iter" for x in log.read_text().splitlines()) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(config_file):
    assert main(["train", "--config", str(config_file), "--override", "lr=1e200"]) == 2


def test_train_bad_input_exit_code(config_file, tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["train", "--config", str(config_file), "--override", "nonsense=1"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "nope"])
    assert exc.value.code == 1


def test_cost_report(capsys):
    args = ["cost-report", "--n-units", "2", "--d-model", "16", "--d-ff", "32", "--n-heads", "2",
            "--seq-len", "16", "--p-avg", "0.75"]
    assert main(args + ["--measure", "20", "--measure-seq-len", "4"]) == 0
    out = capsys.readouterr().out
    assert "reduction theoretical" in out and "0.5000" in out and "reduction measured" in out
    assert main(args[:-2] + ["--p-avg", "0.5", "--mode", "peft"]) == 0
    assert "0.2500" in capsys.readouterr().out


def test_allocate(tmp_path, capsys):
    table = tmp_path / "t.txt"
    table.write_text("# S F\n5 1\n1 1\n1 1\n")
    assert main(["allocate", str(table), "--p-avg", "0.6666666666666666"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:4]]
    assert [r[-1] for r in rows] == ["0.0", "1.0", "1.0"]
    table.write_text("1 2 3\n")
    assert main(["allocate", str(table), "--p-avg", "0.5"]) == 1
    assert main(["allocate", str(tmp_path / "none.txt"), "--p-avg", "0.5"]) == 1


def test_allocate_stdin():
    out = subprocess.run([sys.executable, "-m", "dropbp", "allocate", "-", "--p-avg", "0.5"],
                         input="1 1\n2 1\n", capture_output=True, text=True, check=True).stdout
    assert [line.split("\t")[-1] for line in out.splitlines()[1:3]] == ["1.0", "0.0"]


def test_analyze_paths(capsys):
    assert main(["analyze-paths", "--n-units", "1", "--d-model", "8", "--d-ff", "16", "--n-heads", "2",
                 "--vocab-size", "7", "--seq-len", "4", "--reps", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("k\t") and len(lines) == 2 + 3  # k = 0, 1, 2
    assert main(["analyze-paths", "--n-units", "1", "--d-model", "8", "--d-ff", "16", "--n-heads", "2",
                 "--k", "5"]) == 1


def test_analyze_paths_from_checkpoint(config_file, tmp_path, capsys):
    ckpt = tmp_path / "model.npz"
    assert main(["train", "--config", str(config_file), "--override", f"checkpoint_path={json.dumps(str(ckpt))}"]) == 0
    assert main(["analyze-paths", "--checkpoint", str(ckpt), "--reps", "2", "--k", "0,2"]) == 0
    assert "# blocks 2" in capsys.readouterr().out


def test_count_submodules(capsys):
    assert main(["count-submodules", "--n-layers", "64", "--p", "0.875", "--method", "both"]) == 0
    out = capsys.readouterr().out
    assert "256" in out and "5130659561" in out
    assert main(["count-submodules", "--n-layers", "10", "--p", "0.25", "--method", "freeze"]) == 0
    captured = capsys.readouterr()
    assert captured.out.strip().endswith("128") and "floor" in captured.err
    assert main(["count-submodules", "--n-layers", "4", "--p", "1.5"]) == 1


def test_compare_logs_missing_file(tmp_path):
    assert main(["compare-logs", str(tmp_path / "a"), str(tmp_path / "b")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dropbp", "count-submodules", "--n-layers", "4", "--p", "0"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "16" in res.stdout
    res = subprocess.run([sys.executable, "-m", "dropbp", "bogus"], capture_output=True, text=True)
    assert res.returncode == 1
