import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from fedssl.cli import main
from fedssl.config import ExperimentConfig, get_preset
from fedssl.harness import (
    METRICS_HEADER,
    build_setup,
    compare_runs,
    format_comparison,
    run_experiment,
)


def tiny_config(**kw):
    defaults = dict(
        dataset="synthetic",
        synthetic_class_count=3,
        synthetic_per_class=40,
        synthetic_dim=2,
        synthetic_spread=0.5,
        synthetic_test_per_class=20,
        setting="iid_iid",
        client_count=4,
        labeled_per_class=2,
        clients_per_round=2,
        rounds=3,
        batch_size=5,
        hidden_widths=(8,),
        freg_hidden=4,
        eta=0.05,
        eta_s=0.05,
        eta_w=0.05,
        weak_noise_sigma=0.01,
        strong_noise_sigma=0.05,
        strong_dropout_prob=0.05,
        seed=0,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults).validate()


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        self.t += 1.0
        return self.t


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestRunExperiment:
    def test_single_round_single_row(self, tmp_path):
        cfg = tiny_config(rounds=1)
        run_experiment(cfg, out_dir=tmp_path)
        rows = read_rows(tmp_path / "metrics.csv")
        assert len(rows) == 1
        assert rows[0]["round"] == "0"
        assert rows[0]["algorithm"] == "feddure"

    def test_metrics_header_is_exact(self, tmp_path):
        run_experiment(tiny_config(rounds=1), out_dir=tmp_path)
        first_line = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert first_line == METRICS_HEADER

    def test_byte_identical_reruns_with_deterministic_clock(self, tmp_path):
        cfg = tiny_config(rounds=3)
        run_experiment(cfg, out_dir=tmp_path / "a", clock=FakeClock())
        run_experiment(cfg, out_dir=tmp_path / "b", clock=FakeClock())
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        assert (tmp_path / "a" / "summary.json").read_bytes() == (
            tmp_path / "b" / "summary.json"
        ).read_bytes()
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (
            tmp_path / "b" / "checkpoint.json"
        ).read_bytes()

    def test_real_clock_runs_identical_except_wall_clock(self, tmp_path):
        cfg = tiny_config(rounds=2)
        run_experiment(cfg, out_dir=tmp_path / "a")
        run_experiment(cfg, out_dir=tmp_path / "b")
        rows_a = read_rows(tmp_path / "a" / "metrics.csv")
        rows_b = read_rows(tmp_path / "b" / "metrics.csv")
        for ra, rb in zip(rows_a, rows_b):
            for key in ra:
                if key != "wall_clock_seconds":
                    assert ra[key] == rb[key]

    def test_interrupted_run_leaves_valid_prefix(self, tmp_path):
        cfg = tiny_config(rounds=10)
        boom = RuntimeError("simulated crash")

        calls = {"n": 0}

        def crash_after_two(state):
            calls["n"] += 1
            if calls["n"] == 2:
                raise boom

        with pytest.raises(RuntimeError, match="simulated crash"):
            run_experiment(cfg, out_dir=tmp_path, on_round=crash_after_two)
        rows = read_rows(tmp_path / "metrics.csv")
        assert len(rows) == 2
        assert [r["round"] for r in rows] == ["0", "1"]

    def test_config_archived_verbatim(self, tmp_path):
        from fedssl.config import parse_config_text, serialize_config

        cfg = tiny_config(rounds=1)
        run_experiment(cfg, out_dir=tmp_path)
        archived = (tmp_path / "config.txt").read_text()
        assert archived == serialize_config(cfg)
        assert parse_config_text(archived) == cfg

    def test_summary_reports_final_and_best(self, tmp_path):
        cfg = tiny_config(rounds=3)
        state = run_experiment(cfg, out_dir=tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        history = [r.test_accuracy for r in state.history]
        assert summary["final_accuracy"] == history[-1]
        assert summary["best_accuracy"] == max(history)
        assert summary["rounds"] == 3

    def test_idx_dataset_round(self, tmp_path):
        import struct

        rng = np.random.default_rng(0)
        n, side = 60, 4
        images = rng.integers(0, 256, size=(n, side, side), dtype=np.uint8)
        labels = rng.integers(0, 3, size=n, dtype=np.uint8)
        img = struct.pack(">IIII", 0x803, n, side, side) + images.tobytes()
        lbl = struct.pack(">II", 0x801, n) + labels.tobytes()
        for name, payload in (("train-img", img), ("train-lbl", lbl),
                              ("test-img", img), ("test-lbl", lbl)):
            (tmp_path / name).write_bytes(payload)
        cfg = tiny_config(
            dataset="idx",
            idx_train_images=str(tmp_path / "train-img"),
            idx_train_labels=str(tmp_path / "train-lbl"),
            idx_test_images=str(tmp_path / "test-img"),
            idx_test_labels=str(tmp_path / "test-lbl"),
            labeled_per_class=1,
            rounds=1,
            clients_per_round=2,
            client_count=3,
        )
        state = run_experiment(cfg, out_dir=tmp_path / "out")
        assert len(state.history) == 1


class TestCompareRuns:
    def run_three(self, tmp_path, algorithm, seeds=(0, 1, 2)):
        paths = []
        for seed in seeds:
            out = tmp_path / f"{algorithm}-{seed}"
            run_experiment(tiny_config(algorithm=algorithm, seed=seed, rounds=2),
                           out_dir=out)
            paths.append(out / "metrics.csv")
        return paths

    def test_single_run_zero_std(self, tmp_path):
        paths = self.run_three(tmp_path, "fedavg_supervised", seeds=(0,))
        rows = compare_runs(paths)
        assert rows[0].runs == 1
        assert rows[0].std_final_accuracy == 0.0

    def test_two_identical_runs_mean_equals_either(self, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        cfg = tiny_config(rounds=2)
        run_experiment(cfg, out_dir=out1)
        run_experiment(cfg, out_dir=out2)
        rows = compare_runs([out1 / "metrics.csv", out2 / "metrics.csv"])
        final = read_rows(out1 / "metrics.csv")[-1]["test_accuracy"]
        assert rows[0].mean_final_accuracy == float(final)
        assert rows[0].std_final_accuracy == 0.0

    def test_mean_std_match_hand_recomputation(self, tmp_path):
        paths = self.run_three(tmp_path, "feddure")
        rows = compare_runs(paths)
        finals = [float(read_rows(p)[-1]["test_accuracy"]) for p in paths]
        mean = sum(finals) / 3
        std = (sum((x - mean) ** 2 for x in finals) / 3) ** 0.5
        assert rows[0].mean_final_accuracy == pytest.approx(mean, abs=1e-15)
        assert rows[0].std_final_accuracy == pytest.approx(std, abs=1e-15)

    def test_groups_sorted_by_algorithm(self, tmp_path):
        paths = self.run_three(tmp_path, "feddure", seeds=(0,))
        paths += self.run_three(tmp_path, "fedavg_supervised", seeds=(0,))
        rows = compare_runs(paths)
        assert [r.algorithm for r in rows] == ["fedavg_supervised", "feddure"]
        assert "fedavg_supervised" in format_comparison(rows)

    def test_schema_mismatch_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("round,algo\n0,x\n")
        with pytest.raises(ValueError, match="schema"):
            compare_runs([bad])


class TestCli:
    def test_run_subcommand(self, tmp_path, capsys):
        rc = main([
            "run", "--preset", "iid_iid_synthetic", "--rounds", "2",
            "--clients", "4", "--clients-per-round", "2",
            "--out", str(tmp_path / "run"),
        ])
        assert rc == 0
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert "final accuracy" in capsys.readouterr().out

    def test_run_with_config_file_and_flag_override(self, tmp_path, capsys):
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(
            "synthetic_per_class = 40\nclient_count = 4\nclients_per_round = 2\n"
            "labeled_per_class = 2\nrounds = 5\nhidden_widths = 8\nfreg_hidden = 4\n"
            "eta = 0.05\neta_s = 0.05\neta_w = 0.05\n"
        )
        rc = main([
            "run", "--config", str(cfg_path), "--rounds", "1",
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 0
        rows = read_rows(tmp_path / "out" / "metrics.csv")
        assert len(rows) == 1  # flag beat the file's 5 rounds

    def test_partition_subcommand_writes_reports(self, tmp_path, capsys):
        rc = main([
            "partition", "--preset", "dir_dir_synthetic", "--gamma", "0.4",
            "--out", str(tmp_path),
        ])
        assert rc == 0
        manifest = json.loads((tmp_path / "partition_manifest.json").read_text())
        report = json.loads((tmp_path / "imbalance_report.json").read_text())
        assert manifest["dirichlet_gamma"] == 0.4
        assert len(manifest["clients"]) == 10
        assert "mean_external" in report

    def test_compare_subcommand(self, tmp_path, capsys):
        out = tmp_path / "m"
        run_experiment(tiny_config(rounds=1), out_dir=out)
        rc = main([
            "compare", str(out / "metrics.csv"), "--out", str(tmp_path / "cmp.json"),
        ])
        assert rc == 0
        assert "feddure" in capsys.readouterr().out
        assert json.loads((tmp_path / "cmp.json").read_text())[0]["algorithm"] == "feddure"

    def test_bad_config_returns_error_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("eta = -3\n")
        rc = main(["run", "--config", str(cfg_path)])
        assert rc == 2
        assert "eta" in capsys.readouterr().err

    def test_env_default_output_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("FEDSSL_OUT", str(tmp_path / "env-out"))
        rc = main([
            "run", "--preset", "iid_iid_synthetic", "--rounds", "1",
            "--clients", "4", "--clients-per-round", "2",
        ])
        assert rc == 0
        assert (tmp_path / "env-out" / "metrics.csv").exists()
