#!/usr/bin/env python3
"""
TwinID command-line suite: configuration, dataset files, run ledger and subcommands
"""

import sys
import csv
import json
import math
import tempfile
import unittest
from unittest.mock import patch
from pathlib import Path

import numpy as np
from pydantic import ValidationError

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))

import main as cli
from twinid_beam import Lane
from twinid_config import (Dataset, RunConfig, dump_config, load_config, read_dataset, write_csv_atomic,
                           write_dataset)
from twinid_executive import TwinID
from twinid_kernels import SpaceTimeGrid
from twinid_memory import RunLedger
from twinid_shared import ConfigError, GridError


def tiny_settings(out_dir, **overrides):
    settings = {
        "geometry": {"span_lengths": [20.0, 30.0, 20.0]},
        "grid": {"x_coords": [10.0, 35.0], "t_coords": [5.0, 30.0, 60.0], "sensor_spans": [1]},
        "models": [{"shorthand": "IID-A"}],
        "sampler": {"n_live": 20, "dlogz": 0.5, "walk_steps": 10},
        "data": {"synthetic": {"model": {"shorthand": "IID-A", "theta": {"sigma_model": 1.0}}}},
        "out_dir": str(out_dir),
        "seed": 5,
    }
    settings.update(overrides)
    return settings


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


class TestRunConfig(unittest.TestCase):

    def test_defaults_round_trip(self):
        config = RunConfig()
        self.assertEqual(config.models[0].shorthand, "EXP-A")
        self.assertEqual(RunConfig.model_validate_json(dump_config(config)), config)

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ValidationError):
            RunConfig.model_validate({"bogus": 1})
        with self.assertRaises(ValidationError):
            RunConfig.model_validate({"sampler": {"nlive": 5}})

    def test_invalid_values_rejected(self):
        for bad in ({"schema_version": 2}, {"models": [{"shorthand": "MATERN-A"}]}, {"models": []},
                    {"sweep": {"parameter": "C_v"}}, {"theta_s": {"log10_Kr_9": 1.0}},
                    {"models": [{"shorthand": "IID-A", "theta": {"l_corr": 1.0}}]}, {"workers": 0}):
            with self.subTest(bad=bad):
                with self.assertRaises(ValidationError):
                    RunConfig.model_validate(bad)

    def test_shorthand_normalized(self):
        config = RunConfig.model_validate({"models": [{"shorthand": "exp-m"}]})
        self.assertEqual(config.models[0].shorthand, "EXP-M")

    def test_digest(self):
        a = RunConfig()
        self.assertEqual(a.digest(), RunConfig().digest())
        self.assertNotEqual(a.digest(), RunConfig(seed=1).digest())

    def test_load_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/twinid.json")

    def test_build_objects(self):
        config = RunConfig.model_validate({
            "geometry": {"span_lengths": [20.0, 30.0]},
            "trucks": [{"lane": "right", "axle_offsets": [0.0], "axle_loads": [50.0]}],
            "theta_s": {"log10_Kv": 2.0},
        })
        trucks = config.build_trucks()
        self.assertEqual(len(trucks), 1)
        self.assertEqual(trucks[0].lane, Lane.RIGHT)
        self.assertEqual(trucks[0].z, 5.0)
        self.assertEqual(config.build_theta_s().log10_Kv, 2.0)
        self.assertEqual(config.build_geometry().total_length, 50.0)

    def test_section_segments(self):
        config = RunConfig.model_validate({
            "geometry": {"span_lengths": [20.0, 30.0],
                         "section_segments": [{"x0": 15.0, "x1": 25.0, "I": 0.7}]},
        })
        (x0, x1, section), = config.build_geometry().section_segments
        self.assertEqual((x0, x1), (15.0, 25.0))
        self.assertEqual(section.I, 0.7)
        self.assertEqual(section.c_bottom, config.geometry.c_bottom)
        for bad in ({"x0": 5.0, "x1": 5.0}, {"x0": 1.0, "x1": 2.0, "E": 0.0}, {"x0": 1.0, "x1": 2.0, "A": 1.0}):
            with self.subTest(bad=bad):
                with self.assertRaises(ValidationError):
                    RunConfig.model_validate({"geometry": {"section_segments": [bad]}})


class TestFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_dataset_round_trip(self):
        grid = SpaceTimeGrid([10.0, 20.0, 30.0], [0.0, 2.5])
        y = np.arange(12, dtype=float) / 7.0
        write_dataset(self.dir / "data.csv", Dataset(grid, (Lane.LEFT, Lane.RIGHT), y))
        loaded = read_dataset(self.dir / "data.csv")
        np.testing.assert_array_equal(loaded.grid.x_coords, grid.x_coords)
        np.testing.assert_array_equal(loaded.grid.t_coords, grid.t_coords)
        self.assertEqual(loaded.lanes, (Lane.LEFT, Lane.RIGHT))
        np.testing.assert_array_equal(loaded.y_obs, y)

    def test_dataset_rows_in_any_order(self):
        path = self.dir / "data.csv"
        path.write_text("lane,t,sensor_x,y_obs\nright,1,20,4\nright,0,10,1\nright,1,10,3\nright,0,20,2\n")
        loaded = read_dataset(path)
        self.assertEqual(loaded.lanes, (Lane.RIGHT,))
        np.testing.assert_array_equal(loaded.y_obs, [1.0, 2.0, 3.0, 4.0])

    def test_dataset_errors(self):
        path = self.dir / "data.csv"
        path.write_text("sensor_x,t,y_obs\n10,0,1\n")
        with self.assertRaises(ConfigError):
            read_dataset(path)
        path.write_text("sensor_x,t,lane,y_obs\n10,0,left,1\n20,1,left,2\n")
        with self.assertRaises(GridError):
            read_dataset(path)
        path.write_text("sensor_x,t,lane,y_obs\n10,0,left,1\n10,0,left,2\n")
        with self.assertRaises(GridError):
            read_dataset(path)

    def test_csv_cells(self):
        path = write_csv_atomic(self.dir / "sub" / "out.csv", ["a", "b", "c"], [[0.1, True, np.int64(3)]])
        self.assertEqual(path.read_text(), "a,b,c\n0.1,true,3\n")
        self.assertEqual([p.name for p in path.parent.iterdir()], ["out.csv"])


class TestRunLedger(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.ledger = RunLedger(Path(self.tmp.name) / "runs.db")

    def tearDown(self):
        self.tmp.cleanup()

    def test_run_lifecycle(self):
        run_id = self.ledger.create_run("infer", "abc", "out", seed=3, workers=1)
        self.ledger.record_result(run_id, "EXP-A", -12.5, 0.1, 4000, "out/exp-a_run.json")
        self.ledger.finish_run(run_id)
        run = self.ledger.get_run(run_id)
        self.assertEqual(run["status"], "ok")
        self.assertEqual(run["seed"], 3)
        self.assertEqual(run["results"][0]["model"], "EXP-A")
        self.assertEqual(run["results"][0]["logz"], -12.5)
        self.assertIsNone(self.ledger.get_run("missing"))

    def test_unique_ids(self):
        ids = [self.ledger.create_run("sweep") for _ in range(3)]
        self.assertEqual(len(set(ids)), 3)
        self.assertEqual(self.ledger.count_runs(), 3)
        self.assertEqual(len(self.ledger.list_runs(limit=2)), 2)


class TestSubcommands(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.out = self.dir / "out"
        self.ledger = RunLedger(self.dir / "runs.db")
        self.print_patcher = patch("builtins.print")
        self.print_patcher.start()

    def tearDown(self):
        self.print_patcher.stop()
        self.tmp.cleanup()

    def twin(self, **overrides):
        return TwinID(RunConfig.model_validate(tiny_settings(self.out, **overrides)), ledger=self.ledger)

    def test_infer(self):
        run = self.twin().cmd_infer()
        self.assertTrue(math.isfinite(run.logz))
        archive = json.loads((self.out / "iid-a_run.json").read_text())
        self.assertEqual(archive["model"], "IID-A")
        self.assertEqual(archive["run"]["logz"], run.logz)
        rows = read_rows(self.out / "iid-a_posterior.csv")
        self.assertEqual([r["parameter"] for r in rows], ["sigma_model"])
        self.assertLessEqual(float(rows[0]["hdi_low"]), float(rows[0]["hdi_high"]))
        self.assertEqual(len(read_rows(self.out / "dataset.csv")), 2 * 6)
        ledger_run = self.ledger.list_runs()[0]
        self.assertEqual(ledger_run["command"], "infer")
        self.assertEqual(self.ledger.get_run(ledger_run["run_id"])["results"][0]["logz"], run.logz)

    def test_infer_is_reproducible(self):
        self.twin().cmd_infer()
        first = (self.out / "iid-a_run.json").read_bytes()
        self.twin().cmd_infer()
        self.assertEqual((self.out / "iid-a_run.json").read_bytes(), first)

    def test_infer_from_dataset_file(self):
        grid = SpaceTimeGrid([10.0, 35.0], [5.0, 30.0])
        write_dataset(self.dir / "obs.csv", Dataset(grid, (Lane.RIGHT,), np.array([1.0, 2.0, 3.0, 2.5])))
        twin = self.twin(data={"path": str(self.dir / "obs.csv")})
        run = twin.cmd_infer()
        self.assertTrue(math.isfinite(run.logz))
        self.assertFalse((self.out / "dataset.csv").exists())

    def test_select_identical_models(self):
        report = self.twin(models=[{"shorthand": "IID-A"}, {"shorthand": "IID-A"}]).cmd_select()
        self.assertAlmostEqual(report.models[0].posterior_prob, 0.5)
        self.assertTrue((self.out / "iid-a_2_run.json").exists())
        rows = read_rows(self.out / "model_selection.csv")
        self.assertEqual([r["jeffreys_label"] for r in rows], ["Barely worth mentioning"] * 2)

    def test_select_excludes_reference(self):
        models = [{"shorthand": "IID-A"}, {"shorthand": "EXP-A"},
                  {"shorthand": "IID-A", "reference": True, "reference_sensors": [0]}]
        report = self.twin(models=models).cmd_select()
        pool = [m for m in report.models if not m.reference]
        self.assertAlmostEqual(sum(m.posterior_prob for m in pool), 1.0, places=12)
        rows = read_rows(self.out / "model_selection.csv")
        self.assertEqual([r["model"] for r in rows], ["IID-A", "EXP-A", "IID-A"])
        self.assertEqual(rows[2]["reference"], "true")
        self.assertEqual(rows[2]["posterior_prob"], "nan")
        self.assertTrue((self.out / "iid-a_ref_run.json").exists())

    def test_predict(self):
        draws = self.twin(predict={"n_draws": 50}).cmd_predict()
        self.assertEqual(draws.shape, (50, 12))
        rows = read_rows(self.out / "predictive.csv")
        self.assertEqual(len(rows), 12)
        for row in rows:
            self.assertLessEqual(float(row["q05"]), float(row["q95"]))

    def test_predict_from_archive(self):
        self.twin().cmd_infer()
        archive = self.out / "iid-a_run.json"
        draws = self.twin(predict={"archive": str(archive), "n_draws": 10}).cmd_predict()
        self.assertEqual(draws.shape, (10, 12))

    def test_predict_archive_mismatch(self):
        self.twin().cmd_infer()
        twin = self.twin(models=[{"shorthand": "EXP-A"}],
                         predict={"archive": str(self.out / "iid-a_run.json")})
        with self.assertRaises(ConfigError):
            twin.cmd_predict()

    def test_sweep(self):
        rows = self.twin(sweep={"parameter": "log10_Kr_1", "n_points": 1, "n_positions": 50}).cmd_sweep()
        self.assertEqual(len(rows), 2 * 2)
        self.assertTrue(all(row[0] == 4.0 for row in rows))
        csv_rows = read_rows(self.out / "sweep.csv")
        self.assertEqual(list(csv_rows[0]), ["log10_Kr_1", "lane", "sensor_x", "peak_stress"])

    def test_sweep_decoupled_girders(self):
        rows = self.twin(sweep={"parameter": "log10_Kv", "n_points": 1, "n_positions": 80}).cmd_sweep()
        left = {r[2]: abs(r[3]) for r in rows if r[1] == "left"}
        right = {r[2]: abs(r[3]) for r in rows if r[1] == "right"}
        for x in right:
            self.assertLess(left[x], 1e-3 * right[x])

    def test_sweep_stiffer_spring_reduces_peak(self):
        rows = self.twin(sweep={"parameter": "log10_Kr_1", "n_points": 2, "n_positions": 80}).cmd_sweep()
        soft = {(r[1], r[2]): abs(r[3]) for r in rows if r[0] == 4.0}
        stiff = {(r[1], r[2]): abs(r[3]) for r in rows if r[0] == 10.0}
        self.assertLess(stiff["right", 10.0], soft["right", 10.0])

    def test_loglik_bench(self):
        twin = self.twin(bench={"sizes": [8, 16], "n_x": 4, "models": ["EXP-M", "EXP-A"], "repeats": 1})
        timings = twin.cmd_loglik_bench()
        self.assertEqual(len(timings), 2 * 2 * 2)
        values = read_rows(self.out / "bench_values.csv")
        by_key = {}
        for row in values:
            by_key.setdefault((row["N"], row["model"]), {})[row["path"]] = float(row["loglik"])
        for key, paths in by_key.items():
            self.assertEqual(set(paths), {"dense", "multiplicative-fast" if key[1] == "EXP-M" else "additive-eigen"})
            dense = paths.pop("dense")
            (fast,) = paths.values()
            self.assertAlmostEqual(fast, dense, delta=1e-6 * max(1.0, abs(dense)))

    def test_loglik_bench_skips_dense_above_cap(self):
        twin = self.twin(bench={"sizes": [16], "models": ["EXP-A"], "repeats": 1}, n_dense_max=8)
        timings = twin.cmd_loglik_bench()
        self.assertEqual([t["path"] for t in timings], ["additive-eigen"])

    def test_study(self):
        study = {"grid_sizes": [1], "ground_truth": "IID-A", "pool": ["IID-A", "EXP-A"], "replicates": 1,
                 "n_live": 20}
        self.twin(study=study).cmd_study()
        rows = read_rows(self.out / "study_evidence.csv")
        self.assertEqual(len(rows), 2)
        self.assertTrue(0.0 <= float(rows[0]["accuracy"]) <= 1.0)
        first = (self.out / "study_evidence.csv").read_bytes()
        summary = (self.out / "study_summary.json").read_bytes()
        self.twin(study=study).cmd_study()
        self.assertEqual((self.out / "study_evidence.csv").read_bytes(), first)
        self.assertEqual((self.out / "study_summary.json").read_bytes(), summary)


class TestMain(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.print_patcher = patch("builtins.print")
        self.mock_print = self.print_patcher.start()

    def tearDown(self):
        self.print_patcher.stop()
        self.tmp.cleanup()

    def test_invalid_config_exits_nonzero(self):
        path = self.dir / "bad.json"
        path.write_text(json.dumps({"models": [{"shorthand": "EXP-A"}], "unexpected": True}))
        with self.assertRaises(SystemExit) as ctx:
            cli.main(["infer", "--config", str(path), "--no-ledger"])
        self.assertEqual(ctx.exception.code, 1)

    def test_missing_config_exits_nonzero(self):
        with self.assertRaises(SystemExit) as ctx:
            cli.main(["infer", "--config", str(self.dir / "none.json"), "--no-ledger"])
        self.assertEqual(ctx.exception.code, 1)

    def test_sweep_with_overrides(self):
        path = self.dir / "run.json"
        settings = tiny_settings(self.dir / "ignored", sweep={"n_points": 1, "n_positions": 20})
        path.write_text(json.dumps(settings))
        out = self.dir / "cli_out"
        code = cli.main(["sweep", "--config", str(path), "--out", str(out), "--seed", "2",
                         "--ledger", str(self.dir / "runs.db")])
        self.assertEqual(code, 0)
        self.assertTrue((out / "sweep.csv").exists())
        self.assertFalse((self.dir / "ignored").exists())
        self.assertEqual(RunLedger(self.dir / "runs.db").list_runs()[0]["seed"], 2)

    def test_unsupported_model_path_message(self):
        path = self.dir / "run.json"
        settings = tiny_settings(self.dir / "out", models=[{"shorthand": "RBF-M"}], n_dense_max=4)
        path.write_text(json.dumps(settings))
        ledger = self.dir / "runs.db"
        with self.assertRaises(SystemExit) as ctx:
            cli.main(["infer", "--config", str(path), "--ledger", str(ledger)])
        self.assertEqual(ctx.exception.code, 1)
        printed = " ".join(str(c.args[0]) for c in self.mock_print.call_args_list if c.args)
        self.assertIn("no likelihood path for RBF-M at N=6", printed)
        self.assertIn("N_dense_max=4", printed)
        self.assertEqual(RunLedger(ledger).list_runs()[0]["status"], "failed")

    def test_resolve_config_defaults(self):
        args = cli.build_parser().parse_args(["study", "--workers", "3"])
        config = cli.resolve_config(args)
        self.assertEqual(config.workers, 3)
        self.assertEqual(config.out_dir, "out")


if __name__ == "__main__":
    unittest.main()
