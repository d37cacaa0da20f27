import json
import math

import pytest

from scalelaw.cli import main

from conftest import TRUE

PARAMS = json.dumps(TRUE.as_dict())


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def grid_csv(workdir):
    path = workdir / "grid.csv"
    code = main(
        ["synth", "--params", PARAMS, "--l0", str(math.log(10)),
         "--n-values", "1e5,1e6,1e7,1e8", "--d-values", "1e4,1e5,1e6,1e7",
         "--epochs", "1,4,16,64", "--sigma", "0.002", "--seed", "1", "-o", str(path)]
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def fit_json(workdir, grid_csv):
    path = workdir / "fit.json"
    code = main(["fit", str(grid_csv), "--k-outcomes", "10", "--form", "ours", "--restarts", "4", "-o", str(path)])
    assert code == 0
    return path


def test_synth_writes_sidecar(grid_csv):
    assert grid_csv.read_text().splitlines()[0].startswith("n,")
    man = json.loads((grid_csv.parent / "grid.csv.manifest.json").read_text())
    assert man["command"] == "synth"


def test_fit_output(fit_json):
    payload = json.loads(fit_json.read_text())
    assert payload["form"] == "ours"
    assert payload["params"]["alpha"] == pytest.approx(0.4, rel=0.05)
    assert "manifest" in payload and payload["manifest"]["config_hash"]


def test_fit_to_stdout(capsys, grid_csv):
    code, out, _ = run(capsys, "fit", grid_csv, "--k-outcomes", "10", "--form", "chinchilla", "--restarts", "2")
    assert code == 0
    assert json.loads(out)["form"] == "chinchilla"


def test_predict(capsys, fit_json):
    code, out, _ = run(capsys, "predict", fit_json, "--n", "1e6,1e7", "--d", "1e5,1e5")
    assert code == 0
    rows = json.loads(out)["predictions"]
    assert len(rows) == 2 and rows[1]["loss"] < rows[0]["loss"]


def test_allocate_budget(capsys, fit_json):
    code, out, _ = run(capsys, "allocate", fit_json, "--rho-d", "1e3", "--budget", "1e18")
    assert code == 0
    res = json.loads(out)["allocation"]
    assert res["program"] == "P2" and res["foc_residual"] < 1e-6


def test_allocate_target_round_trip(capsys, fit_json):
    code, out, _ = run(capsys, "allocate", fit_json, "--rho-d", "1e3", "--target-loss", "0.7")
    assert code == 0
    res = json.loads(out)["allocation"]
    assert res["program"] == "P1"
    assert res["loss"] == pytest.approx(0.7, rel=1e-10)


def test_allocate_below_floor(capsys, fit_json):
    code, _, err = run(capsys, "allocate", fit_json, "--rho-d", "1", "--target-loss", "0.1")
    assert code == 4
    assert json.loads(err)["error"] == "below-floor"


def test_frontier_csv(capsys, workdir, fit_json):
    out_path = workdir / "frontier.csv"
    code, _, _ = run(capsys, "frontier", fit_json, "--rho-d", "1e3", "--budgets", "1e16,1e17,1e18", "-o", out_path)
    assert code == 0
    lines = out_path.read_text().splitlines()
    assert lines[0].startswith("budget,loss") and len(lines) == 4
    assert (workdir / "frontier.csv.manifest.json").exists()


def test_verify_and_isoflop(capsys, workdir, fit_json):
    iso = workdir / "iso.csv"
    code, out, _ = run(capsys, "verify", fit_json, "--extreme", "1e60", "--isoflop", iso, "--n-samples", "20")
    assert code == 0
    assert json.loads(out)["all_pass"]
    assert iso.read_text().startswith("curve,c,n,t,loss,optimal")


def test_eval_and_report(capsys, workdir, grid_csv):
    rep = workdir / "eval.csv"
    code, _, _ = run(
        capsys, "eval", grid_csv, "--k-outcomes", "10", "--forms", "ours",
        "--protocols", "high-c,in-sample", "--restarts", "3", "-o", rep,
    )
    assert code == 0
    assert len(rep.read_text().splitlines()) == 3
    md = workdir / "eval.md"
    code, _, _ = run(capsys, "report", workdir / "eval.json", "-o", md)
    assert code == 0
    assert "| ours |" in md.read_text()


@pytest.mark.parametrize(
    "argv,code",
    [
        (["fit", "{grid}", "--k-outcomes", "10", "--form", "gpt"], 2),
        (["fit", "{grid}", "--k-outcomes", "10", "--form", "chinchilla", "--e-hinge"], 2),
        (["fit", "{grid}", "--form", "ours"], 2),
        (["fit", "missing.csv", "--k-outcomes", "10", "--form", "ours"], 5),
    ],
)
def test_exit_codes(capsys, grid_csv, argv, code):
    argv = [a.replace("{grid}", str(grid_csv)) for a in argv]
    got, _, err = run(capsys, *argv)
    assert got == code
    assert json.loads(err)["exit_code"] == code


def test_bad_row_reports_line(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("n,d,t,loss\n1e6,1e4,1e5,1.2\n1e6,1e4,1e5,-1\n")
    code, _, err = run(capsys, "fit", bad, "--k-outcomes", "10", "--form", "ours")
    assert code == 5
    assert json.loads(err)["line"] == 3


def test_fit_failure_exit(capsys, grid_csv):
    code, _, err = run(capsys, "fit", grid_csv, "--k-outcomes", "10", "--form", "ours", "--restarts", "1", "--max-iters", "1")
    assert code == 3
    assert json.loads(err)["restarts"]
