import csv
import json

import numpy as np
import pytest

from aggcausal.cli import main
from aggcausal.grid import read_ascii_grid

CONFIG = {
    "scenario": {"n_rows": 10, "n_cols": 10, "n_facilities": 12, "n_months": 6, "n_static": 3, "n_dynamic": 1,
                 "n_true_static": 1, "n_true_dynamic": 1, "beta0": -4.0},
    "pipeline": {"bootstrap": 2, "D_z": 20, "D_rit": 20, "covariate_rows": 200, "n_basis": 10,
                 "spikeslab_chains": 2, "spikeslab_burn_in": 100, "spikeslab_steps": 200,
                 "window": {"train_months": 4, "forecast_months": 2, "n_iterations": 2, "step": 1}},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "config.json").write_text(json.dumps(CONFIG))
    assert main(["synth", "--config", str(d / "config.json"), "--seed", "1", "--out-dir", str(d)]) == 0
    return d


def test_synth_outputs(workdir):
    sc = json.loads((workdir / "scenario.json").read_text())
    assert len(sc["features"]) == 5
    assert sc["spec"]["seed"] == 1
    assert read_ascii_grid(workdir / "friction.asc").values.shape == (10, 10)
    assert (workdir / "d0_t0.asc").exists() and (workdir / "d0_t-1.asc").exists()
    rows = list(csv.DictReader((workdir / "counts.csv").open()))
    assert len(rows) == 6 * 12


def test_select_causal_schema(workdir, capsys):
    code, out, _ = run(capsys, "select", "causal", "--config", workdir / "config.json", "--scenario",
                       workdir / "scenario.json", "--seed", 0, "--out-dir", workdir)
    assert code == 0
    msg = json.loads(out)
    assert msg["status"] == "ok" and msg["command"] == "select"
    rows = list(csv.DictReader((workdir / "ranking_causal.csv").open()))
    assert len(rows) == 5
    assert all(0.0 <= float(r["score"]) <= 1.0 for r in rows)
    assert set(rows[0]) == {"feature", "scale_tag", "score"}
    sel = json.loads((workdir / "selected_causal.json").read_text())
    assert set(sel["selected"]) <= {r["feature"] for r in rows}


def test_select_requires_seed(workdir, capsys):
    code, out, err = run(capsys, "select", "causal", "--scenario", workdir / "scenario.json")
    assert code == 1 and out == ""
    assert json.loads(err)["status"] == "error"


def test_select_spikeslab(workdir, capsys):
    code, _, _ = run(capsys, "select", "spikeslab", "--config", workdir / "config.json", "--scenario",
                     workdir / "scenario.json", "--seed", 0, "--out-dir", workdir)
    assert code == 0
    rows = list(csv.DictReader((workdir / "ranking_spikeslab.csv").open()))
    assert len(rows) == 5 and all(0 <= float(r["probability"]) <= 1 for r in rows)


def test_fit_then_evaluate(workdir, capsys):
    code, _, _ = run(capsys, "fit", "--config", workdir / "config.json", "--scenario", workdir / "scenario.json",
                     "--seed", 0, "--out-dir", workdir, "--months", "0:4")
    assert code == 0
    code, out, _ = run(capsys, "evaluate", "--scenario", workdir / "scenario.json", "--model",
                       workdir / "model.json", "--months", "4:6", "--out-dir", workdir)
    assert code == 0
    metrics = json.loads((workdir / "metrics.json").read_text())
    assert set(metrics) >= {"overall_correlation", "temporal_correlation", "temporal_correlation_y2", "rmse"}
    assert json.loads(out)["result"] == metrics


def test_evaluate_identity(tmp_path, capsys):
    rng = np.random.default_rng(0)
    lines = ["facility,month,observed,predicted"]
    for j in range(4):
        for t in range(5):
            v = rng.gamma(2.0)
            lines.append(f"{j},{t},{v!r},{v!r}")
    (tmp_path / "pred.csv").write_text("\n".join(lines) + "\n")
    code, _, _ = run(capsys, "evaluate", "--predictions", tmp_path / "pred.csv", "--out-dir", tmp_path)
    assert code == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["overall_correlation"] == pytest.approx(1.0) and m["rmse"] == 0.0


def test_report_deterministic_and_reconciles(workdir, tmp_path, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        code, _, _ = run(capsys, "report", "--config", workdir / "config.json", "--scenario",
                         workdir / "scenario.json", "--seed", 3, "--out-dir", d, "--methods", "none,causal")
        assert code == 0
        outs.append((d / "report.json").read_bytes())
    assert outs[0] == outs[1]
    rep = json.loads(outs[0])
    assert len(rep["iterations"]) == 2
    for m in ("none", "causal"):
        vals = [it["methods"][m]["metrics"]["rmse"] for it in rep["iterations"]]
        assert rep["summary"][m]["mean_rmse"] == pytest.approx(np.mean(vals), rel=1e-12)
    assert "ranking_stability" in rep["summary"]["causal"]


def test_jobs_do_not_change_ranking(workdir, tmp_path, capsys):
    texts = []
    for jobs in (1, 2):
        d = tmp_path / f"j{jobs}"
        code, _, err = run(capsys, "select", "causal", "--config", workdir / "config.json", "--scenario",
                           workdir / "scenario.json", "--seed", 4, "--jobs", jobs, "--out-dir", d)
        assert code == 0, err
        texts.append((d / "ranking_causal.csv").read_text())
    assert texts[0] == texts[1]


def test_unknown_config_key_is_error(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"pipeline": {"nonsense": 1}}))
    code, _, err = run(capsys, "synth", "--config", tmp_path / "bad.json", "--out-dir", tmp_path)
    assert code == 1
    e = json.loads(err)
    assert e["error"] == "ValueError" and "nonsense" in e["message"]


def test_missing_file_is_error(tmp_path, capsys):
    code, _, err = run(capsys, "fit", "--scenario", tmp_path / "nope.json", "--seed", 0)
    assert code == 1 and json.loads(err)["status"] == "error"
