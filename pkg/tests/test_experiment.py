import json
import math
from pathlib import Path

import numpy as np
import pytest

from mcontrast import ConfigError, TooManyFailures
from mcontrast.experiment import (
    ExperimentConfig,
    PRESETS,
    emit_report,
    preset_config,
    resolve_delta,
    run_experiment,
)


def small_config(**kw):
    base = dict(model="example2-ou", theta0=[1.0], eps=1e-2, n_obs=5,
                euler_steps=2000, replicates=4, estimators=("smce",),
                master_seed=11)
    base.update(kw)
    return ExperimentConfig(**base)


class TestDeltaRule:
    def test_power_law(self):
        assert resolve_delta("eps**1.5", 1e-2, 1.0, 10 ** 6) == pytest.approx(
            1e-3)
        assert resolve_delta("eps ** 2", 1e-1, 1.0, 100) == pytest.approx(1e-2)

    def test_literal(self):
        assert resolve_delta(2e-3, 1e-2, 1.0, 100) == 2e-3
        assert resolve_delta("0.005", 1e-2, 1.0, 100) == 0.005

    def test_auto_floors_the_power_law(self):
        # at eps = 1e-2, N = 1e6 the power law already resolves the fast
        # chain; at eps = 1e-3 it does not and the floor takes over
        assert resolve_delta("auto", 1e-2, 1.0, 10 ** 6) == pytest.approx(1e-3)
        floored = resolve_delta("auto", 1e-3, 1.0, 10 ** 6)
        assert floored == pytest.approx(math.sqrt(20e-9), rel=1e-12)
        assert floored > 1e-3 ** 1.5

    def test_invalid(self):
        with pytest.raises(ConfigError):
            resolve_delta("delta^2", 1e-2, 1.0, 100)
        with pytest.raises(ConfigError):
            resolve_delta(-1.0, 1e-2, 1.0, 100)


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ConfigError):
            small_config(n_obs=3, euler_steps=1000).validated()

    def test_estimator_names(self):
        with pytest.raises(ConfigError):
            small_config(estimators=("mle",)).validated()

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"model": "example2-ou",
                                        "theta0": [1.0], "eps": 1e-2,
                                        "n_obs": 5, "euler_steps": 1000,
                                        "replicates": 1, "banana": 3})

    def test_from_json_roundtrip(self, tmp_path):
        cfg = small_config()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        loaded = ExperimentConfig.from_json(path)
        assert loaded.to_dict() == cfg.validated().to_dict()

    def test_theta0_outside_box(self):
        cfg = small_config(theta0=[7.0])
        with pytest.raises(ConfigError):
            run_experiment(cfg)


class TestRunExperiment:
    def test_single_replicate_conventions(self):
        rep = run_experiment(small_config(replicates=1))
        s = rep.summaries["smce"]
        assert s.successes == 1
        assert np.all(s.empirical_sd == 0.0)
        assert s.ci68[0][0] == s.ci68[0][1] == pytest.approx(float(s.mean[0]))

    def test_deterministic_given_config(self, tmp_path):
        cfg = small_config(replicates=3)
        r1 = run_experiment(cfg)
        r2 = run_experiment(small_config(replicates=3))
        p1 = emit_report(r1, tmp_path / "a", timestamp="T")
        p2 = emit_report(r2, tmp_path / "b", timestamp="T")
        t1 = Path(p1["json"]).read_text()
        t2 = Path(p2["json"]).read_text()
        strip = lambda t: "\n".join(l for l in t.splitlines()
                                    if "runtime_seconds" not in l)
        assert strip(t1) == strip(t2)
        assert Path(p1["csv"]).read_text() == Path(p2["csv"]).read_text()

    def test_ci_ratios_exact(self):
        rep = run_experiment(small_config(replicates=4))
        s = rep.summaries["smce"]
        sd = float(s.empirical_sd[0])
        if sd > 0:
            hw68 = (s.ci68[0][1] - s.ci68[0][0]) / 2
            hw95 = (s.ci95[0][1] - s.ci95[0][0]) / 2
            assert hw68 / sd == pytest.approx(1.0, abs=1e-12)
            assert hw95 / sd == pytest.approx(1.96, abs=1e-12)

    def test_theoretical_sd_ordering(self):
        # the limit SD of the simplified
        # estimator dominates the weighted estimator's (equality for constant q)
        rep = run_experiment(small_config(estimators=("mce", "smce"),
                                          replicates=2))
        sd_m = rep.summaries["mce"].theoretical_sd[0]
        sd_s = rep.summaries["smce"].theoretical_sd[0]
        assert sd_s >= sd_m - 1e-12

    def test_warnings_advisories(self):
        rep = run_experiment(small_config(eps=0.2, n_obs=10,
                                          euler_steps=2000, replicates=1))
        joined = " ".join(rep.derived["warnings"])
        assert "high-frequency advisory" in joined

    def test_too_many_failures(self, monkeypatch):
        import mcontrast.experiment as exp

        calls = {"i": 0}

        def failing_estimate(*args, **kwargs):
            calls["i"] += 1
            from mcontrast import NoDescent
            raise NoDescent("injected")

        monkeypatch.setattr(exp, "estimate", failing_estimate)
        with pytest.raises(TooManyFailures):
            run_experiment(small_config(replicates=4))
        assert calls["i"] == 4

    def test_failures_under_threshold_are_excluded(self, monkeypatch):
        import mcontrast.experiment as exp
        real = exp.estimate
        state = {"i": 0}

        def flaky(*args, **kwargs):
            state["i"] += 1
            if state["i"] == 1:
                from mcontrast import WeightDegenerate
                raise WeightDegenerate("injected")
            return real(*args, **kwargs)

        monkeypatch.setattr(exp, "estimate", flaky)
        rep = run_experiment(small_config(replicates=40))
        s = rep.summaries["smce"]
        assert s.failures == 1 and s.successes == 39
        failed_rows = [r for r in rep.replicate_rows if r.get("failed")]
        assert len(failed_rows) == 1 and "injected" in failed_rows[0]["error"]

    def test_histograms_count_successes(self):
        rep = run_experiment(small_config(replicates=4))
        s = rep.summaries["smce"]
        hist = s.histograms[0]
        assert sum(hist["count"]) == s.successes
        # overlay density integrates to ~1 over the covered range
        width = hist["bin_right"][0] - hist["bin_left"][0]
        integral = sum(hist["overlay_density"]) * width
        assert integral == pytest.approx(1.0, abs=0.01)


class TestEmission:
    def test_csv_row_count_and_columns(self, tmp_path):
        rep = run_experiment(small_config(replicates=3,
                                          estimators=("mce", "smce")))
        paths = emit_report(rep, tmp_path, timestamp="T")
        lines = Path(paths["csv"]).read_text().strip().splitlines()
        assert lines[0].split(",")[:4] == ["replicate", "seed", "estimator",
                                           "theta_hat_0"]
        assert len(lines) == 1 + 3 * 2
        ok_rows = [l for l in lines[1:] if l.split(",")[7] == "0"]
        assert len(ok_rows) == 6

    def test_hist_file_format(self, tmp_path):
        rep = run_experiment(small_config(replicates=4))
        paths = emit_report(rep, tmp_path, timestamp="T")
        hist_path = paths["hist_smce_0"]
        lines = Path(hist_path).read_text().strip().splitlines()
        assert lines[0] == "bin_left,bin_right,count,density,overlay_density"
        assert len(lines) == 1 + 30
        counts = [int(l.split(",")[2]) for l in lines[1:]]
        assert sum(counts) == rep.summaries["smce"].successes

    def test_json_structure(self, tmp_path):
        rep = run_experiment(small_config(replicates=2))
        paths = emit_report(rep, tmp_path, timestamp="FIXED")
        payload = json.loads(Path(paths["json"]).read_text())
        assert payload["generated_at"] == "FIXED"
        assert payload["config"]["model"] == "example2-ou"
        assert "delta" in payload["derived"]
        assert "smce" in payload["estimators"]
        est = payload["estimators"]["smce"]
        assert set(est) >= {"mean", "empirical_sd", "ci68", "ci95",
                            "theoretical_sd", "successes", "failures"}


class TestPresets:
    def test_all_presets_valid(self):
        for name in PRESETS:
            cfg = preset_config(name)
            cfg.validated()
            assert cfg.euler_steps % cfg.n_obs == 0

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_config("table99")

    def test_preset_returns_copy(self):
        a = preset_config("table3")
        a.replicates = 1
        assert preset_config("table3").replicates == 200
