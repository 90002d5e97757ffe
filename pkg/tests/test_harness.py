import csv
import json

import numpy as np
import pytest

from qmmm_defects.harness.cli import main
from qmmm_defects.harness.config import ExperimentConfig
from qmmm_defects.harness.experiments import run_converge, run_reference, slope_within


def small_vacancy(**over):
    raw = {"R_DOM": 20.0, "defect": {"type": "vacancy", "site": [0, 0]}, "mm": {"type": "taylor", "K": 1},
           "schedule": {"R_QM": [4, 6], "width": 4.0, "R_MM": 14.0}}
    raw.update(over)
    return raw


class TestConfig:
    def test_defaults_merged(self):
        cfg = ExperimentConfig({"R_DOM": 70.0})
        assert cfg["scheme"] == "force" and cfg.schedule == [4.0, 6.0, 8.0, 12.0, 16.0]
        assert cfg.solver.tol == 1e-8

    def test_schedule_must_increase(self):
        with pytest.raises(ValueError):
            ExperimentConfig(small_vacancy(schedule={"R_QM": [6, 4], "width": 4.0, "R_MM": 14.0}))

    def test_bad_scheme(self):
        with pytest.raises(ValueError):
            ExperimentConfig(small_vacancy(scheme="mixed"))

    def test_R_MM_beyond_domain(self):
        with pytest.raises(ValueError):
            ExperimentConfig(small_vacancy(schedule={"R_QM": [4], "width": 4.0, "R_MM": 30.0}))

    def test_power_rule(self):
        cfg = ExperimentConfig(small_vacancy(R_DOM=60.0, schedule={
            "R_QM": [4, 9, 16], "width": 4.0, "R_MM": {"factor": 2.0, "power": 1.5, "max": 50.0}}))
        assert cfg.R_MM(4.0) == pytest.approx(16.0)
        assert cfg.R_MM(9.0) == pytest.approx(50.0)  # 54 capped
        # never below R_QM + width
        cfg2 = ExperimentConfig(small_vacancy(schedule={"R_QM": [4], "width": 4.0,
                                                         "R_MM": {"factor": 1.0, "power": 1.0}}))
        assert cfg2.R_MM(4.0) == 8.0

    def test_digest(self):
        a = ExperimentConfig(small_vacancy())
        b = ExperimentConfig(dict(reversed(list(small_vacancy().items()))))
        assert a.digest() == b.digest()
        assert a.digest() != ExperimentConfig(small_vacancy(seed=1)).digest()
        assert a.digest(["lattice", "R_DOM"]) == ExperimentConfig(small_vacancy(seed=1)).digest(["lattice", "R_DOM"])


def test_slope_within():
    assert slope_within(-3.2, {"slope": -3.0, "slope_tol": 0.75})
    assert not slope_within(-3.8, {"slope": -3.0, "slope_tol": 0.75})
    assert slope_within(-2.1, {"slope_max": -0.8})
    assert not slope_within(-0.5, {"slope_max": -0.8})


class TestReference:
    def test_no_defect_is_zero(self, tmp_path):
        cfg = ExperimentConfig(small_vacancy(defect={"type": "none"}, cache_dir=str(tmp_path)))
        _, u, info = run_reference(cfg)
        assert info["converged"] and np.all(u == 0)

    def test_cache_reused(self, tmp_path):
        cfg = ExperimentConfig(small_vacancy(cache_dir=str(tmp_path)))
        _, u1, i1 = run_reference(cfg)
        _, u2, i2 = run_reference(cfg)
        assert not i1["cached"] and i2["cached"]
        assert i1["converged"] and np.array_equal(u1, u2)
        assert np.max(np.abs(u1)) > 1e-3


class TestConverge:
    def test_small_schedule(self, tmp_path):
        cfg = ExperimentConfig(small_vacancy(cache_dir=str(tmp_path / "cache")))
        report, summary = run_converge(cfg, tmp_path, log=None)
        assert summary["all_converged"]
        errs = [r["error"] for r in report.rows]
        assert errs[1] < errs[0]
        with open(tmp_path / "converge.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["error"]) for r in rows] == errs

    def test_rerun_bit_identical(self, tmp_path):
        raw = small_vacancy(cache_dir=str(tmp_path / "cache"))
        a = run_converge(ExperimentConfig(raw), None, log=None)[0]
        b = run_converge(ExperimentConfig(raw), None, log=None)[0]
        assert [r["error"] for r in a.rows] == [r["error"] for r in b.rows]


class TestCLI:
    def test_bad_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(small_vacancy(scheme="mixed")))
        assert main(["converge", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "bad config" in capsys.readouterr().err
        bad.write_text("{not json")
        assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_fit_needs_mlip(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(small_vacancy()))
        assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_fit_deterministic(self, tmp_path):
        cfg = tmp_path / "fit.json"
        cfg.write_text(json.dumps(small_vacancy(mm={"type": "mlip", "K_E": 2}, scheme="energy")))
        outs = [tmp_path / "a", tmp_path / "b"]
        for o in outs:
            assert main(["fit", "--config", str(cfg), "--out", str(o)]) == 0
        for name in ("potential.json", "observations.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        report = json.loads((outs[0] / "fit_report.json").read_text())
        assert report["rrmse"]["E1"] < 0.02 and report["rrmse"]["E2"] < 0.02
