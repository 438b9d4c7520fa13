import csv
import json
import math

import numpy as np
import pytest

from lgssm_bench import experiments
from lgssm_bench.em import EmConfig
from lgssm_bench.experiments import ExperimentConfig, aggregate, resolve_point, run_sweep, run_trial
from lgssm_bench.lstm import TrainConfig

FAST_EM = EmConfig(n_restarts=2, max_iters=10)
FAST_LSTM = TrainConfig(max_epochs=2)


def _small(**kw):
    base = dict(sweep="q_ratio", grid=[1.0, 1e4], T=30, n_train_per_class=10, n_test_per_class=20,
                n_mc=2, em=FAST_EM, lstm=FAST_LSTM)
    base.update(kw)
    return ExperimentConfig(**base)


class TestAggregate:
    def test_two_points(self):
        m, s = aggregate([0.6, 0.8])
        assert m == pytest.approx(0.7, abs=1e-15)
        assert s == pytest.approx(0.141421356, abs=1e-9)

    def test_identical_and_single(self):
        assert aggregate([0.55] * 7)[1] == 0.0
        assert aggregate([0.3]) == (0.3, 0.0)

    def test_against_two_pass_oracle(self, rng):
        x = rng.uniform(0.4, 1.0, size=100)
        mean = math.fsum(x) / 100
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in x) / 99)
        m, s = aggregate(x)
        assert abs(m - mean) <= 1e-12 and abs(s - std) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestConfig:
    def test_default_settings(self):
        cfg = ExperimentConfig()
        assert len(cfg.grid) == 10 and cfg.grid[0] == 1.0 and cfg.grid[-1] == pytest.approx(1e4)
        assert (cfg.T, cfg.n_train_per_class, cfg.n_test_per_class) == (120, 250, 250)
        assert (cfg.Q1, cfg.R1, cfg.R2) == (1e-5, 1e-3, 1e-3)
        assert ExperimentConfig(sweep="train_size").grid[-1] == 2000

    @pytest.mark.parametrize("kw", [
        {"grid": []}, {"grid": [2.0, 1.0]}, {"n_mc": 0}, {"classifiers": ("svm",)},
        {"sweep": "train_size", "grid": [21]}, {"sweep": "bogus"},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="n_mcc"):
            ExperimentConfig.from_dict({"n_mcc": 3})
        with pytest.raises(ValueError, match=r"\[em\].*restarts"):
            ExperimentConfig.from_dict({"em": {"restarts": 3}})

    def test_dict_round_trip(self):
        cfg = _small(classifiers=("lstm", "true"))
        back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.as_dict())))
        assert back == cfg
        assert back.classifiers == ("true", "lstm")

    def test_resolve_points(self):
        q = resolve_point(ExperimentConfig(sweep="q_ratio"), 100.0)
        assert q.params2.Q[0, 0] == pytest.approx(1e-3) and q.params2.R[0, 0] == 1e-3
        r = resolve_point(ExperimentConfig(sweep="r_ratio"), 10.0)
        assert r.params1.Q[0, 0] == 1e-3 and r.params2.R[0, 0] == pytest.approx(1e-4)
        t = resolve_point(ExperimentConfig(sweep="sequence_length"), 45)
        assert t.T == 45 and t.params2.Q[0, 0] == 2e-5
        n = resolve_point(ExperimentConfig(sweep="train_size"), 126)
        assert n.n_train_per_class == 63 and n.params1.Sigma0[0, 0] == 1e-4


class TestTrial:
    def test_deterministic(self):
        point = resolve_point(_small(), 1e4)
        a = run_trial(point, (5, 1, 0), em_config=FAST_EM, lstm_config=FAST_LSTM)
        b = run_trial(point, (5, 1, 0), em_config=FAST_EM, lstm_config=FAST_LSTM)
        assert a.accuracy == b.accuracy

    def test_subset_does_not_change_other_classifiers(self):
        point = resolve_point(_small(), 10.0)
        full = run_trial(point, (1, 0, 3), em_config=FAST_EM, lstm_config=FAST_LSTM)
        only = run_trial(point, (1, 0, 3), classifiers=("true",))
        assert only.accuracy == {"true": full.accuracy["true"]}

    def test_easy_point_true_lrt(self):
        point = resolve_point(ExperimentConfig(n_test_per_class=250), 1e4)
        res = run_trial(point, (0, 9, 0), classifiers=("true",))
        assert res.accuracy["true"] >= 0.99

    def test_identical_models_at_chance(self):
        cfg = _small(T=60, n_train_per_class=50, n_test_per_class=1000)
        res = run_trial(resolve_point(cfg, 1.0), (3, 0, 0), em_config=FAST_EM, lstm_config=TrainConfig(max_epochs=5))
        band = 3 * math.sqrt(0.25 / 2000)
        for name, acc in res.accuracy.items():
            assert abs(acc - 0.5) <= band, name

    def test_failure_is_recorded_with_stage(self, monkeypatch):
        def boom(*a, **k):
            raise experiments.EmError("all EM restarts failed")
        monkeypatch.setattr(experiments, "fit", boom)
        res = run_trial(resolve_point(_small(), 1.0), (0, 0, 0), classifiers=("true", "em"), em_config=FAST_EM)
        assert "true" in res.accuracy and "em" not in res.accuracy
        assert res.failures["em"].startswith("[em-fit]")


class TestSweep:
    def test_outputs_and_worker_invariance(self, tmp_path):
        cfg = _small()
        t1 = run_sweep(cfg, tmp_path / "a", workers=1)
        run_sweep(cfg, tmp_path / "b", workers=2)
        raw_a = (tmp_path / "a" / "raw.csv").read_bytes()
        assert raw_a == (tmp_path / "b" / "raw.csv").read_bytes()
        assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
        rows = list(csv.reader(raw_a.decode().splitlines()))
        assert rows[0] == experiments.RAW_HEADER
        assert len(rows) == 1 + 2 * 3 * 2
        summary = list(csv.DictReader((tmp_path / "a" / "summary.csv").open()))
        assert [r["classifier"] for r in summary[:3]] == ["true", "em", "lstm"]
        for r in t1.rows:
            m, s = aggregate(r.accuracies)
            assert r.mean_std == (m, s)
            assert r.n_ok == cfg.n_mc
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["status"] == "complete" and manifest["seed"] == 0

    def test_single_run_std_is_zero(self):
        table = run_sweep(_small(n_mc=1, classifiers=("true",)))
        assert all(r.mean_std[1] == 0.0 for r in table.rows)

    def test_interrupt_keeps_completed_points(self, tmp_path, monkeypatch):
        real = experiments.run_trial

        def flaky(point, key, *a, **k):
            if key[1] == 1:
                raise KeyboardInterrupt
            return real(point, key, *a, **k)

        monkeypatch.setattr(experiments, "run_trial", flaky)
        with pytest.raises(KeyboardInterrupt):
            run_sweep(_small(classifiers=("true",)), tmp_path)
        rows = list(csv.DictReader((tmp_path / "raw.csv").open()))
        assert {r["sweep_value"] for r in rows} == {"1"}
        assert len(rows) == 2
        assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "interrupted"

    def test_true_lrt_monotone_in_q_ratio(self):
        cfg = ExperimentConfig(n_mc=10, classifiers=("true",), seed=4)
        means = run_sweep(cfg).means("true")
        drops = np.diff(means)
        assert (drops < 0).sum() <= 1
        assert drops.min() >= -0.02
