import csv
import hashlib
import json
import subprocess
import sys

import pytest

from vispost.cli import main
from vispost.data import load_forecasts, load_predictions

SIM = {"n_stations": 3, "n_days": 45, "lead_times": [6, 12]}
EXPERIMENT = {
    "training_length": 30,
    "climatology_length": 10,
    "verification_start": "2020-02-05",
    "verification_end": "2020-02-05",
}


def _config(tmp_path, **over):
    cfg = {"seed": 3, "jobs": 1, "simulation": SIM, "experiment": EXPERIMENT, "verification": {"n_boot": 50}}
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_row_count_and_determinism(tmp_path):
    sim = {"n_stations": 5, "n_days": 30, "lead_times": [6, 12, 18, 24]}
    cfg = _config(tmp_path, simulation=sim)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert len(load_forecasts(tmp_path / "a" / "data" / "forecasts.csv")) == 600
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and set(manifest["files"]) == {"forecasts.csv", "observations.csv", "stations.csv"}


def test_simulate_validation_happens_before_writing(tmp_path):
    cfg = _config(tmp_path, simulation={"n_stations": 0})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert not (tmp_path / "run").exists()


def test_seed_is_mandatory(tmp_path):
    cfg = _config(tmp_path)
    data = json.loads(open(cfg).read())
    del data["seed"]
    open(cfg, "w").write(json.dumps(data))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "run"), "--seed", "1"]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 1


def test_bad_config_and_missing_inputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    bad.write_text(json.dumps({"seed": 1, "typo": 2}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert main(["simulate", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "r")]) == 3
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert main(["predict", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3
    assert main(["report", "--config", cfg, "--out", str(tmp_path / "empty")]) == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = _config(root)
    run = root / "run"
    for cmd in ("simulate", "train", "predict", "verify", "report"):
        assert main([cmd, "--config", cfg, "--out", str(run)]) == 0, cmd
    return root, cfg, run


def test_local_training_writes_one_file_per_station_and_lead(pipeline):
    _, _, run = pipeline
    files = sorted(p.name for p in (run / "models").glob("polr_local_*_2020-02-05.json"))
    assert len(files) == 6
    assert "polr_local_6_S01_2020-02-05.json" in files


def test_regional_training_writes_one_file_per_lead(pipeline):
    root, cfg, run = pipeline
    assert main(["train", "--config", cfg, "--out", str(run), "--scheme", "regional"]) == 0
    files = sorted(p.name for p in (run / "models").glob("polr_regional_*.json") if "manifest" not in p.name)
    assert files == ["polr_regional_12_all_2020-02-05.json", "polr_regional_6_all_2020-02-05.json"]


def test_predictions_carry_full_pmfs(pipeline):
    _, _, run = pipeline
    t = load_predictions(run / "predictions" / "polr_local.csv")
    assert t.pmf.shape == (6, 84)
    ref = load_predictions(run / "predictions" / "climatology.csv")
    assert t.keys == ref.keys


def test_rerun_is_identical(pipeline, tmp_path):
    root, cfg, run = pipeline
    again = tmp_path / "again"
    for cmd in ("simulate", "train", "predict", "verify", "report"):
        assert main([cmd, "--config", cfg, "--out", str(again)]) == 0
    a, b = _hashes(run), _hashes(again)
    common = [k for k in a if "regional" not in k]
    assert {k: a[k] for k in common} == {k: b[k] for k in common}


def test_verify_identical_to_climatology_has_zero_skill(pipeline, tmp_path):
    _, cfg, run = pipeline
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(run, copy)
    shutil.copy(copy / "predictions" / "climatology.csv", copy / "predictions" / "polr_local.csv")
    assert main(["verify", "--config", cfg, "--out", str(copy)]) == 0
    rows = [r for r in _read_csv(copy / "scores" / "scores_vs_climatology.csv") if r["model"] == "polr_local"]
    assert rows and all(float(r["crpss_vs_climatology"]) == 0.0 for r in rows)


def test_verify_rejects_mismatched_observations(pipeline, tmp_path):
    _, cfg, run = pipeline
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(run, copy)
    path = copy / "predictions" / "raw.csv"
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[3] = "1" if cells[3] != "1" else "2"
    lines[1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    assert main(["verify", "--config", cfg, "--out", str(copy)]) == 1


def test_report_ratio_of_half_raw_is_fifty_percent(tmp_path):
    def row(model, crps, logs):
        skill = {"crpss": 0.0, "crpss_lo": 0.0, "crpss_hi": 0.0, "logss": 0.0, "logss_lo": 0.0, "logss_hi": 0.0}
        return {
            "lead_h": 6, "model": model, "mean_crps": crps, "mean_logs": logs, "coverage90": 0.9,
            "mean_width": 1.0, "rmse_mean": 1.0, "n_cases": 10, "skill": {"raw": skill},
        }

    (tmp_path / "scores").mkdir()
    doc = {"references": ["raw"], "rows": [row("raw", 4000.0, 3.0), row("polr_local", 2000.0, 1.5)]}
    (tmp_path / "scores" / "scores.json").write_text(json.dumps(doc))
    assert main(["report", "--out", str(tmp_path)]) == 0
    ratios = {r["model"]: r for r in _read_csv(tmp_path / "report" / "ratio_vs_raw.csv")}
    assert float(ratios["polr_local"]["crps_pct_of_raw"]) == 50.0
    assert float(ratios["polr_local"]["logs_pct_of_raw"]) == 50.0
    assert float(ratios["raw"]["crps_pct_of_raw"]) == 100.0


def test_train_fails_only_when_every_fit_fails(tmp_path):
    cfg = _config(tmp_path, experiment={**EXPERIMENT, "polr": {"max_iter": 1}})
    run = str(tmp_path / "run")
    assert main(["simulate", "--config", cfg, "--out", run]) == 0
    assert main(["train", "--config", cfg, "--out", run]) == 2
    manifest = json.loads((tmp_path / "run" / "models" / "polr_local_manifest.json").read_text())
    assert len(manifest["failures"]) == 6
    assert main(["predict", "--config", cfg, "--out", run]) == 2


def test_infeasible_window_is_a_validation_error(tmp_path):
    cfg = _config(tmp_path, experiment={**EXPERIMENT, "training_length": 60})
    run = str(tmp_path / "run")
    assert main(["simulate", "--config", cfg, "--out", run]) == 0
    assert main(["train", "--config", cfg, "--out", run]) == 1


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "vispost.cli", "simulate", "--config", cfg, "--out", str(tmp_path / "run")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "run" / "data" / "forecasts.csv").exists()
