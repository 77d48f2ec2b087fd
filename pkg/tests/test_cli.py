import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from blmrobust.cli import main
from blmrobust.data import write_trace
from blmrobust.model import load_weights, save_weights


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    if code == 0:
        return code, json.loads(out)
    return code, json.loads(err)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def small_data(workdir):
    assert main(["gen-data", "--n-scans", "6", "--seed", "3", "--out", str(workdir / "ds")]) == 0
    return workdir / "ds"


@pytest.fixture(scope="module")
def saved_clean(workdir, clean_model):
    path = workdir / "clean.npz"
    save_weights(clean_model, path)
    return path


def test_gen_data_rerun_identical(capsys, workdir, small_data):
    code, res = run(capsys, "gen-data", "--n-scans", 6, "--seed", 3, "--out", workdir / "ds2")
    assert code == 0
    for name in ("train.csv", "val.csv", "test.csv", "manifest.json"):
        assert filecmp.cmp(small_data / name, workdir / "ds2" / name, shallow=False)


def test_train_then_finetune(capsys, workdir, small_data):
    code, res = run(capsys, "train", "--data", small_data, "--epochs", 2, "--out", workdir / "m")
    assert code == 0
    rows = list(csv.DictReader(open(workdir / "m" / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    code, err = run(capsys, "finetune-adv", "--model", workdir / "m" / "weights.npz",
                    "--data", small_data, "--out", workdir / "m")
    assert code == 1 and err["error"] == "ValidationError"
    code, res = run(capsys, "finetune-adv", "--model", workdir / "m" / "weights.npz",
                    "--data", small_data, "--budgets", "0.10,0.02", "--epochs", 1,
                    "--pgd-steps", 2, "--out", workdir / "m")
    assert code == 0
    log = json.loads((workdir / "m" / "finetune_log.json").read_text())
    assert len(log["epochs"]) == 1 and log["config"]["mode"] == "adv_finetune"
    assert load_weights(workdir / "m" / "weights_adv.npz").fingerprint() == log["fingerprint"]


def test_eval_robust_all_kinds(capsys, workdir, small_data, saved_clean):
    out = workdir / "eval"
    code, _ = run(capsys, "eval-robust", "--model", saved_clean, "--data", small_data,
                  "--limit", 6, "--steps", 5, "--scales", "0.5,1,2", "--out", out)
    assert code == 0
    pipe = []
    for tag in ("0p5", "1", "2"):
        rep = json.loads((out / f"robustness_x{tag}.json").read_text())
        kinds = {c["kind"]: c for c in rep["configs"]}
        assert len(kinds) == 5
        assert kinds["Baseline"]["ra_tool"] == kinds["Baseline"]["ra_pipe"]
        pipe.append(kinds["Baseline"]["ra_pipe"])
        with open(out / f"robustness_x{tag}.csv") as fh:
            assert sum(1 for _ in fh) == 1 + 5 * 6
    assert pipe[0] >= pipe[1] >= pipe[2]


def test_eval_empty_dataset(capsys, workdir, saved_clean):
    (workdir / "empty").mkdir()
    code, err = run(capsys, "eval-robust", "--model", saved_clean, "--data", workdir / "empty",
                    "--out", workdir / "e")
    assert code == 1 and err["error"] == "EmptyDataset"


def test_missing_input_and_bad_args(capsys, workdir):
    code, err = run(capsys, "train", "--data", workdir / "nope", "--out", workdir / "x")
    assert code == 1 and err["error"] == "ValidationError"
    code, err = run(capsys, "no-such-command")
    assert code == 1
    code, err = run(capsys, "train", "--data", workdir, "--epochs", "many")
    assert code == 1


def test_unwritable_output(capsys):
    code, err = run(capsys, "gen-data", "--n-scans", 1, "--out", "/proc/blm-out")
    assert code == 2 and err["error"] == "IoError"


def test_seq_attack_outputs(capsys, workdir, saved_clean):
    out = workdir / "sq"
    code, res = run(capsys, "seq-attack", "--model", saved_clean, "--range", "200,215",
                    "--max-length", 3, "--out", out)
    assert code == 0
    seq = json.loads((out / "sequence.json").read_text())
    assert seq["n_goal"] == 16 and seq["n_flips"] >= 8 and seq["outside_unchanged"]
    probs = list(csv.DictReader(open(out / "window_probs.csv")))
    assert set(probs[0]) >= {"origin", "clean_p0", "pert_p2", "clean_label", "pert_label"}
    assert len(seq["smoothness_perturbed"]["steps"]) == len(probs) - 1
    clean = np.loadtxt(out / "clean_trace.csv", delimiter=",", skiprows=1)
    pert = np.loadtxt(out / "perturbed_trace.csv", delimiter=",", skiprows=1)
    assert clean.shape == pert.shape and not np.array_equal(clean, pert)


def test_seq_attack_zero_budget_and_bad_range(capsys, workdir, saved_clean):
    code, res = run(capsys, "seq-attack", "--model", saved_clean, "--range", "200,215",
                    "--budgets", "0,0", "--max-length", 2, "--out", workdir / "sq0")
    assert code == 0
    seq = json.loads((workdir / "sq0" / "sequence.json").read_text())
    assert seq["n_flips"] == 0
    clean = (workdir / "sq0" / "clean_trace.csv").read_bytes()
    assert (workdir / "sq0" / "perturbed_trace.csv").read_bytes() == clean
    code, err = run(capsys, "seq-attack", "--model", saved_clean, "--range", "500,560",
                    "--out", workdir / "sq1")
    assert code == 1


def test_attack_and_check_candidate(capsys, workdir, saved_clean, dataset):
    for k, x in enumerate(dataset.test.windows[dataset.test.labels == 2][:10]):
        write_trace(x, workdir / "win.csv")
        out = workdir / f"a{k}"
        code, att = run(capsys, "attack", "--model", saved_clean, "--trace", workdir / "win.csv",
                        "--origin", 0, "--out", out)
        assert code == 0
        assert json.loads((out / "attack.json").read_text()) == att
        # a delta file is written only when the attack produced a candidate
        assert (out / "delta.csv").exists() == att["tool_success"]
        if att["pipeline_success"]:
            break
    else:
        pytest.fail("no successful attack among ten channeling windows")
    code, chk = run(capsys, "check-candidate", "--model", saved_clean, "--window", workdir / "win.csv",
                    "--delta", out / "delta.csv", "--out", workdir / "c")
    assert code == 0 and chk["pipeline_success"] and chk["admissible"]
    zero = np.zeros_like(x)
    write_trace(zero, workdir / "zero.csv")
    code, chk = run(capsys, "check-candidate", "--model", saved_clean, "--window", workdir / "win.csv",
                    "--delta", workdir / "zero.csv", "--out", workdir / "c")
    assert code == 0 and not chk["pipeline_success"]


def test_summarize_command(capsys, workdir, small_data, saved_clean):
    out = workdir / "ev1"
    assert run(capsys, "eval-robust", "--model", saved_clean, "--data", small_data, "--limit", 3,
               "--steps", 3, "--kinds", "Baseline", "--out", out)[0] == 0
    code, res = run(capsys, "summarize", "--reports", out / "robustness.json",
                    "--manifest", small_data / "manifest.json",
                    "--weights", f"clean={saved_clean}", "--out", workdir / "s")
    assert code == 0 and res["rows"] == 1
    md = (workdir / "s" / "summary.md").read_text()
    assert "| clean | Baseline |" in md


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "blmrobust.cli", "gen-data", "--n-scans", "0",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    err = json.loads(proc.stderr)
    assert err["exit_code"] == 1 and err["error"] == "InvalidSplit"
