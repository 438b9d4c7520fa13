import csv
import time

import numpy as np
import pytest

from lgssm_bench import cli, experiments, io
from lgssm_bench.classifiers import LrtClassifier, lrt_scores
from lgssm_bench.em import EmConfig, fit
from lgssm_bench.ssm import ModelParams, generate_dataset, make_rng

SIM = """
T = {T}
n_per_class = {n}
seed = 7

[model1]
Q = 1e-5
R = 1e-3

[model2]
Q = {Q2}
R = 1e-3
"""

DESK = """
T = 40
n_train_per_class = 10
n_test_per_class = 25

[em]
n_restarts = 2
max_iters = 10

[lstm]
max_epochs = 2
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestSimulate:
    def test_full_sized_dataset(self, tmp_path):
        cfg = _write(tmp_path, "sim.toml", SIM.format(T=120, n=250, Q2=1e-3))
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 0
        data = io.read_dataset(tmp_path / "d.csv")
        assert len(data) == 500 and data.T == 120
        assert data.class_counts() == {1: 250, 2: 250}
        assert (tmp_path / "d.manifest.json").exists()

    def test_byte_identical_rerun(self, tmp_path):
        cfg = _write(tmp_path, "sim.toml", SIM.format(T=20, n=5, Q2=1e-3))
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a.csv")])
        cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b.csv")])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_T(self, tmp_path, capsys):
        text = SIM.format(T=1, n=5, Q2=1e-3).replace("T = 1\n", "")
        cfg = _write(tmp_path, "sim.toml", text)
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) != 0
        assert "'T'" in capsys.readouterr().err

    def test_unknown_key_and_syntax_error(self, tmp_path, capsys):
        cfg = _write(tmp_path, "sim.toml", SIM.format(T=5, n=5, Q2=1e-3) + "Tee = 3\n")
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 2
        assert "Tee" in capsys.readouterr().err
        cfg = _write(tmp_path, "bad.toml", "T = 5\nn_per_class = = 3\n")
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 2
        assert "line 2" in capsys.readouterr().err


class TestExperiment:
    def test_default_grid_three_rows_per_point(self, tmp_path):
        cfg = _write(tmp_path, "exp.toml", DESK)
        out = tmp_path / "out"
        code = cli.main(["experiment", "task-difficulty-q", "--config", cfg, "--out", str(out),
                         "--n-mc", "1", "--workers", "1"])
        assert code == 0
        rows = list(csv.DictReader((out / "summary.csv").open()))
        assert len(rows) == 30
        assert len({r["sweep_value"] for r in rows}) == 10
        assert {r["classifier"] for r in rows} == {"true", "em", "lstm"}

    def test_subset_is_fast(self, tmp_path):
        cfg = _write(tmp_path, "exp.toml", DESK)
        t0 = time.perf_counter()
        code = cli.main(["experiment", "task-difficulty-r", "--config", cfg, "--out", str(tmp_path),
                         "--n-mc", "2", "--classifiers", "true,em", "--workers", "1"])
        assert code == 0
        assert time.perf_counter() - t0 < 60
        rows = list(csv.DictReader((tmp_path / "raw.csv").open()))
        assert {r["classifier"] for r in rows} == {"true", "em"}

    def test_rerun_from_manifest_and_env_workers(self, tmp_path, monkeypatch):
        cfg = _write(tmp_path, "exp.toml", DESK)
        args = ["--n-mc", "2", "--classifiers", "true,em,lstm"]
        assert cli.main(["experiment", "seq-length", "--config", cfg, "--out", str(tmp_path / "a"),
                         "--workers", "1", *args]) == 0
        monkeypatch.setenv("LGSSM_WORKERS", "2")
        assert cli.main(["experiment", "seq-length", "--manifest", str(tmp_path / "a" / "manifest.json"),
                         "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "raw.csv").read_bytes() == (tmp_path / "b" / "raw.csv").read_bytes()
        assert '"workers": 2' in (tmp_path / "b" / "manifest.json").read_text()

    def test_interrupt_flushes_completed_points(self, tmp_path, monkeypatch, capsys):
        real = experiments.run_trial

        def interrupted(point, key, *a, **k):
            if key[1] == 2:
                raise KeyboardInterrupt
            return real(point, key, *a, **k)

        monkeypatch.setattr(experiments, "run_trial", interrupted)
        code = cli.main(["experiment", "task-difficulty-q", "--out", str(tmp_path), "--n-mc", "3",
                         "--classifiers", "true", "--workers", "1"])
        assert code == cli.EXIT_INTERRUPT
        rows = list(csv.DictReader((tmp_path / "raw.csv").open()))
        assert len(rows) == 2 * 3
        assert len({r["sweep_value"] for r in rows}) == 2

    def test_excluded_trials_set_exit_status(self, tmp_path, monkeypatch):
        def fail(*a, **k):
            raise experiments.EmError("synthetic failure")

        monkeypatch.setattr(experiments, "fit", fail)
        cfg = _write(tmp_path, "exp.toml", DESK)
        base = ["experiment", "train-size", "--config", cfg, "--n-mc", "1", "--classifiers", "true,em",
                "--workers", "1"]
        assert cli.main(base + ["--out", str(tmp_path / "a")]) == cli.EXIT_PARTIAL
        assert cli.main(base + ["--out", str(tmp_path / "b"), "--allow-partial"]) == 0
        rows = list(csv.DictReader((tmp_path / "b" / "summary.csv").open()))
        em_rows = [r for r in rows if r["classifier"] == "em"]
        assert all(r["n_failed"] == "1" and r["n_ok"] == "0" for r in em_rows)

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = _write(tmp_path, "exp.toml", DESK + "\n[extra]\nx = 1\n")
        assert cli.main(["experiment", "task-difficulty-q", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "extra" in capsys.readouterr().err


def _pair(Q2):
    return ModelParams.scalar(Q=1e-5, R=1e-3, Sigma0=1e-4), ModelParams.scalar(Q=Q2, R=1e-3, Sigma0=1e-4)


class TestClassify:
    def test_true_pair_easy_ratio(self, tmp_path, capsys):
        p1, p2 = _pair(1e-1)
        data = generate_dataset(p1, p2, 250, 120, make_rng(0))
        io.write_dataset(tmp_path / "test.csv", data)
        io.write_params(tmp_path / "m1.json", p1, provenance="true")
        io.write_params(tmp_path / "m2.json", p2, provenance="true")
        code = cli.main(["classify", "--data", str(tmp_path / "test.csv"), "--models",
                         str(tmp_path / "m1.json"), str(tmp_path / "m2.json"), "--out", str(tmp_path / "p.csv")])
        assert code == 0
        acc = float(capsys.readouterr().out.split()[1])
        assert acc >= 0.99

    def test_em_files_match_in_memory(self, tmp_path):
        p1, p2 = _pair(1e-4)
        train = generate_dataset(p1, p2, 20, 60, make_rng(1))
        test = generate_dataset(p1, p2, 30, 60, make_rng(2))
        io.write_dataset(tmp_path / "train.csv", train)
        io.write_dataset(tmp_path / "test.csv", test)
        cfg = _write(tmp_path, "em.toml", "[em]\nn_restarts = 3\nmax_iters = 20\n")
        assert cli.main(["fit-em", "--data", str(tmp_path / "train.csv"), "--config", cfg,
                         "--out", str(tmp_path / "m"), "--seed", "4"]) == 0
        assert cli.main(["classify", "--data", str(tmp_path / "test.csv"), "--models",
                         str(tmp_path / "m" / "model1.json"), str(tmp_path / "m" / "model2.json"),
                         "--out", str(tmp_path / "p.csv")]) == 0
        em_cfg = EmConfig(n_restarts=3, max_iters=20)
        f1 = fit(train.of_class(1), em_cfg, make_rng(4, 1))
        f2 = fit(train.of_class(2), em_cfg, make_rng(4, 2))
        labels, ll1, ll2 = lrt_scores(LrtClassifier(f1.params, f2.params), test)
        rows = list(csv.DictReader((tmp_path / "p.csv").open()))
        np.testing.assert_array_equal([int(r["pred_label"]) for r in rows], labels)
        np.testing.assert_array_equal([float(r["loglik1"]) for r in rows], ll1)

    def test_lstm_network_path(self, tmp_path):
        p1, p2 = _pair(1e-1)
        io.write_dataset(tmp_path / "train.csv", generate_dataset(p1, p2, 8, 30, make_rng(3)))
        cfg = _write(tmp_path, "l.toml", "[lstm]\nmax_epochs = 3\nn_h = 4\n")
        assert cli.main(["train-lstm", "--data", str(tmp_path / "train.csv"), "--config", cfg,
                         "--out", str(tmp_path / "net.npz")]) == 0
        assert cli.main(["classify", "--data", str(tmp_path / "train.csv"), "--network",
                         str(tmp_path / "net.npz"), "--out", str(tmp_path / "p.csv")]) == 0
        rows = list(csv.DictReader((tmp_path / "p.csv").open()))
        assert len(rows) == 16 and rows[0]["loglik1"] == ""

    def test_dimension_mismatch(self, tmp_path, capsys):
        q = ModelParams(np.eye(1), np.ones((2, 1)), [[1e-5]], np.eye(2) * 1e-3, [0.0], [[1e-4]])
        io.write_dataset(tmp_path / "d.csv", generate_dataset(q, q, 2, 5, make_rng(0)))
        p1, p2 = _pair(1e-3)
        io.write_params(tmp_path / "m1.json", p1)
        io.write_params(tmp_path / "m2.json", p2)
        code = cli.main(["classify", "--data", str(tmp_path / "d.csv"), "--models",
                         str(tmp_path / "m1.json"), str(tmp_path / "m2.json"), "--out", str(tmp_path / "p.csv")])
        assert code == 2
        assert "dimension" in capsys.readouterr().err
