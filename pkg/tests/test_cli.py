"""Command-line interface: JSON payloads, exit codes, determinism."""
import json
import subprocess
import sys

import numpy as np
import pytest

from rankscore import SimDesign, generate_dataset, write_csv
from rankscore.cli import run_cli


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    design = SimDesign(n=220, p=9)
    dataset, _ = generate_dataset(design, np.random.default_rng(314))
    data = root / "data.csv"
    write_csv(dataset, data)
    z = ",".join(format(v, ".17g") for v in design.z())
    return {"root": root, "data": str(data), "z": z, "design": design}


def _run(argv, capsys):
    rc = run_cli(argv)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def test_estimate_writes_json_and_plot_csv(workdir, capsys):
    out = workdir["root"] / "est.json"
    rc, _, err = _run(["estimate", "--data", workdir["data"],
                       "--z", workdir["z"], "--tau", "0.5",
                       "--band-draws", "20000", "--seed", "1",
                       "--out", str(out)], capsys)
    assert rc == 0, err
    payload = json.loads(out.read_text())
    for key in ("tau", "alpha_hat", "sigma2", "ci_low", "ci_high", "level",
                "lambda", "gamma", "kappa", "H1", "H0", "diagnostics"):
        assert key in payload
    assert payload["tau"] == [0.5]
    assert len(payload["alpha_hat"]) == 1
    assert payload["ci_low"][0] < payload["alpha_hat"][0] < payload["ci_high"][0]
    assert payload["n"] == 220 and payload["p"] == 9
    plot = workdir["root"] / "est.csv"
    assert plot.exists()
    lines = plot.read_text().strip().splitlines()
    assert len(lines) == 2  # header + one grid point
    assert lines[0].split(",")[0] == "tau"


def test_estimate_is_byte_deterministic(workdir, capsys):
    a = workdir["root"] / "det_a.json"
    b = workdir["root"] / "det_b.json"
    for out in (a, b):
        rc, _, err = _run(["estimate", "--data", workdir["data"],
                           "--z", workdir["z"], "--tau", "0.5", "--no-band",
                           "--seed", "9", "--out", str(out)], capsys)
        assert rc == 0, err
    assert a.read_bytes() == b.read_bytes()


def test_band_recomputes_from_saved_estimate(workdir, capsys):
    est = workdir["root"] / "est.json"  # written by the first test
    out = workdir["root"] / "band.json"
    rc, _, err = _run(["band", "--estimate", str(est), "--draws", "20000",
                       "--seed", "1", "--out", str(out)], capsys)
    assert rc == 0, err
    payload = json.loads(out.read_text())
    saved = json.loads(est.read_text())
    assert payload["kappa"] == pytest.approx(saved["kappa"], abs=0.05)
    assert payload["level"] == saved["level"]


def test_tune_reports_lambda_and_cv(workdir, capsys):
    rc, out_text, err = _run(["tune", "--data", workdir["data"],
                              "--z", workdir["z"], "--tau", "0.5",
                              "--folds", "5", "--seed", "2"], capsys)
    assert rc == 0, err
    payload = json.loads(out_text)
    assert payload["folds"] == 5
    assert payload["lambda"]["arm1"] > 0.0
    assert len(payload["arm1"]) == 1
    cv = payload["arm1"][0]
    assert cv["gamma"] > 0.0
    assert cv["tau"] == 0.5


def test_z_can_come_from_a_file(workdir, capsys):
    zfile = workdir["root"] / "z.csv"
    zfile.write_text("\n".join(workdir["z"].split(",")) + "\n")
    out = workdir["root"] / "est_zfile.json"
    rc, _, err = _run(["estimate", "--data", workdir["data"],
                       "--z", str(zfile), "--tau", "0.5", "--no-band",
                       "--seed", "9", "--out", str(out)], capsys)
    assert rc == 0, err
    ref = workdir["root"] / "det_a.json"
    assert json.loads(out.read_text())["alpha_hat"] == \
        json.loads(ref.read_text())["alpha_hat"]


def test_simulate_small_study_with_csv(workdir, capsys):
    out = workdir["root"] / "sim.json"
    table = workdir["root"] / "sim.csv"
    argv = ["simulate", "--design", "homo-sparse", "--n", "250", "--p", "9",
            "--reps", "3", "--tau", "0.5", "--estimators", "oracle",
            "--seed", "4", "--out", str(out), "--csv", str(table)]
    rc, _, err = _run(argv, capsys)
    assert rc == 0, err
    payload = json.loads(out.read_text())
    assert payload["design"]["n"] == 250
    assert payload["estimators"] == ["oracle"]
    assert len(payload["rows"]) == 1
    assert payload["rows"][0]["n_used"] == 3
    lines = table.read_text().strip().splitlines()
    assert len(lines) == 2
    # same seed gives byte-identical output
    out2 = workdir["root"] / "sim2.json"
    argv2 = argv[:];  argv2[argv2.index(str(out))] = str(out2)
    rc, _, _ = _run(argv2[:-2], capsys)  # drop --csv for the second run
    assert rc == 0
    assert out.read_bytes() == out2.read_bytes()


def test_config_file_with_flag_precedence(workdir, capsys):
    cfg = workdir["root"] / "run.cfg"
    cfg.write_text(f"data = {workdir['data']}\nz = {workdir['z']}\n"
                   "tau = 0.5\nlevel = 0.9\nband = false\nseed = 9\n")
    out = workdir["root"] / "cfg.json"
    rc, _, err = _run(["estimate", "--config", str(cfg), "--level", "0.8",
                       "--out", str(out)], capsys)
    assert rc == 0, err
    payload = json.loads(out.read_text())
    assert payload["level"] == 0.8  # flag beats config
    assert payload["tau"] == [0.5]  # config beats default


def test_usage_errors_exit_2(workdir, capsys):
    rc, _, err = _run(["estimate", "--z", workdir["z"], "--tau", "0.5",
                       "--out", "x.json"], capsys)
    assert rc == 2
    msg = json.loads(err.strip())
    assert msg["error"] == "usage"
    rc, _, err = _run(["estimate", "--data", "no_such_file.csv",
                       "--z", workdir["z"], "--tau", "0.5",
                       "--out", "x.json"], capsys)
    assert rc == 2
    rc, _, err = _run(["simulate", "--estimators", "sorcery"], capsys)
    assert rc == 2


def test_runtime_errors_exit_1_with_json_line(workdir, capsys):
    bad_z = ",".join(["0.1"] * 4)  # wrong length for p = 9
    rc, _, err = _run(["estimate", "--data", workdir["data"], "--z", bad_z,
                       "--tau", "0.5", "--no-band", "--out", "x.json"], capsys)
    assert rc == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    msg = json.loads(lines[0])
    assert msg["error"] == "DataError"


def test_module_entry_point_runs_in_subprocess(workdir):
    out = workdir["root"] / "sub.json"
    proc = subprocess.run(
        [sys.executable, "-m", "rankscore.cli", "tune",
         "--data", workdir["data"], "--z", workdir["z"], "--tau", "0.5",
         "--folds", "4", "--seed", "3", "--out", str(out)],
        capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(out.read_text())["folds"] == 4
