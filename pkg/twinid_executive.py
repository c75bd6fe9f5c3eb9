#!/usr/bin/env python3
import functools
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from twinid_beam import BeamModel, ThetaS, assemble
from twinid_config import (Dataset, ModelEntry, RunConfig, read_dataset, read_json, write_csv_atomic,
                           write_dataset, write_dict_rows, write_json_atomic)
from twinid_inference import (IdentificationProblem, ModelEvidence, ModelSelectionReport, NestedRun,
                              SamplerConfig, default_prior_box, nested_sample, posterior_predictive,
                              select_models, summarize_run)
from twinid_kernels import KernelKind, SpaceTimeGrid, is_independent
from twinid_likelihood import (ErrorStructure, LikelihoodPath, ProbModelSpec, build_covariance_dense,
                               choose_path, loglik_additive_fast, loglik_dense, loglik_multiplicative_fast)
from twinid_memory import RunLedger
from twinid_shared import (STRUCTURAL_BOUNDS, ConfigError, StudyFailureError,
                           UnsupportedConfigurationError, logger)
from twinid_study import StudyConfig, make_sensor_grid, run_study, sample_synthetic

try:
    import psutil
except ImportError:
    psutil = None


def _peak_rss_mb() -> float:
    """Peak resident set size of this process so far."""
    if psutil is not None:
        info = psutil.Process().memory_info()
        if hasattr(info, "peak_wset"):
            return info.peak_wset / 1024 / 1024
    try:
        import resource
    except ImportError:
        return float("nan")
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return peak / 1024 / 1024 if sys.platform == "darwin" else peak / 1024


def _ledgered(command: str):
    """Record the wrapped subcommand in the run ledger as ok or failed."""
    def wrap(method):
        @functools.wraps(method)
        def run(self, *args, **kwargs):
            self._start(command)
            try:
                result = method(self, *args, **kwargs)
            except BaseException:
                self._finish("failed")
                raise
            self._finish()
            return result
        return run
    return wrap


class TwinID:
    """Runs one subcommand against a validated RunConfig and writes its outputs."""

    def __init__(self, config: RunConfig, out_dir: Path = None, ledger: Optional[RunLedger] = None):
        self.config = config
        self.out_dir = Path(out_dir or config.out_dir)
        self.ledger = ledger
        self.geometry = config.build_geometry()
        self.trucks = config.build_trucks(self.geometry)
        self.theta_s = config.build_theta_s()
        self._dataset: Optional[Dataset] = None
        self.run_id: Optional[str] = None

    # --- Shared plumbing ---

    def _start(self, command: str) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.ledger is not None:
            self.run_id = self.ledger.create_run(command, self.config.digest(), str(self.out_dir),
                                                 self.config.seed, self.config.workers)

    def _finish(self, status: str = "ok") -> None:
        if self.ledger is not None and self.run_id is not None:
            self.ledger.finish_run(self.run_id, status)

    def _record(self, model: str, run: NestedRun = None, archive: Path = None) -> None:
        if self.ledger is not None and self.run_id is not None:
            self.ledger.record_result(self.run_id, model, run.logz if run else None,
                                      run.logz_err if run else None, run.nfe if run else None,
                                      str(archive) if archive else "")

    def sampler_config(self, seed: int = None) -> SamplerConfig:
        s = self.config.sampler
        return SamplerConfig(n_live=s.n_live, seed=self.config.seed if seed is None else seed, dlogz=s.dlogz,
                             walk_steps=s.walk_steps, max_iter=s.max_iter, workers=self.config.workers)

    def sensor_grid(self) -> SpaceTimeGrid:
        g = self.config.grid
        if g.x_coords is not None and g.t_coords is not None:
            return SpaceTimeGrid(np.array(g.x_coords), np.array(g.t_coords))
        return make_sensor_grid(g.n_x, g.n_t, self.geometry, g.sensor_spans)

    def dataset(self) -> Dataset:
        """The configured dataset file, or a seeded synthetic draw (written to the output dir)."""
        if self._dataset is not None:
            return self._dataset
        data = self.config.data
        if data.path is not None:
            self._dataset = read_dataset(data.path)
            logger.info(f"Loaded dataset {data.path}: N={self._dataset.grid.size} x {self._dataset.n_lanes} lanes")
            return self._dataset

        grid = self.sensor_grid()
        beam = BeamModel(self.geometry, grid.x_coords)
        y_model = beam.response(self.theta_s, self.trucks, grid)
        entry = data.synthetic.model
        spec = ProbModelSpec.from_shorthand(entry.shorthand, entry.theta)
        seed = self.config.seed if data.synthetic.seed is None else data.synthetic.seed
        y_obs = sample_synthetic(spec, grid, y_model, seed, len(self.trucks), self.config.n_dense_max)
        self._dataset = Dataset(grid, tuple(t.lane for t in self.trucks), y_obs)
        write_dataset(self.out_dir / "dataset.csv", self._dataset)
        return self._dataset

    def trucks_for(self, dataset: Dataset):
        by_lane = {t.lane: t for t in self.trucks}
        missing = [lane.value for lane in dataset.lanes if lane not in by_lane]
        if missing:
            raise ConfigError(f"dataset lanes {missing} have no configured truck")
        return tuple(by_lane[lane] for lane in dataset.lanes)

    def build_problem(self, entry: ModelEntry, dataset: Dataset) -> IdentificationProblem:
        grid, y_obs = dataset.grid, dataset.y_obs
        if entry.reference and (entry.reference_sensors or entry.reference_times):
            blocks = y_obs.reshape(dataset.n_lanes, grid.size)
            y_obs = np.concatenate([grid.subvector(b, entry.reference_sensors, entry.reference_times)
                                    for b in blocks])
            grid = grid.subgrid(entry.reference_sensors, entry.reference_times)
        box = default_prior_box(entry.shorthand, self.config.infer_structural, self.config.priors, strict=False)
        return IdentificationProblem(entry.shorthand, grid, y_obs, box, n_lanes=dataset.n_lanes,
                                     beam=BeamModel(self.geometry, grid.x_coords),
                                     trucks=self.trucks_for(dataset), theta_s=self.theta_s,
                                     fixed_theta_c=entry.theta, n_dense_max=self.config.n_dense_max)

    def infer_model(self, entry: ModelEntry, tag: str) -> Tuple[NestedRun, Path]:
        dataset = self.dataset()
        problem = self.build_problem(entry, dataset)
        print(f"🚀 Sampling {entry.shorthand} ({problem.box.dim} parameters, N={problem.grid.size * dataset.n_lanes})")
        run = nested_sample(problem.loglik, problem.box, self.sampler_config())
        for msg in run.diagnostics:
            print(f"⚠️ {entry.shorthand}: {msg}")

        summary = summarize_run(run)
        archive = write_json_atomic(self.out_dir / f"{tag}_run.json", {
            "model": entry.shorthand,
            "reference": entry.reference,
            "ess": run.ess(),
            "summary": summary,
            "run": run.to_dict(),
        })
        write_dict_rows(self.out_dir / f"{tag}_posterior.csv", summary)
        self._record(entry.shorthand, run, archive)
        print(f"✅ {entry.shorthand}: logZ = {run.logz:.3f} ± {run.logz_err:.3f} (nfe={run.nfe}, {run.termination})")
        return run, archive

    # --- Subcommands ---

    @_ledgered("infer")
    def cmd_infer(self) -> NestedRun:
        entry = self.config.models[0]
        run, _ = self.infer_model(entry, entry.shorthand.lower())
        return run

    @_ledgered("select")
    def cmd_select(self) -> ModelSelectionReport:
        tags = self._model_tags(self.config.models)
        entries = []
        for entry, tag in zip(self.config.models, tags):
            run, _ = self.infer_model(entry, tag)
            entries.append(ModelEvidence(entry.shorthand, run.logz, run.logz_err, run.nfe, entry.reference))
        report = select_models(entries)

        rows = [[m.shorthand, m.reference, m.logz, m.logz_err, m.posterior_prob, m.bayes_factor_vs_best,
                 m.jeffreys_label, m.nfe] for m in report.models]
        write_csv_atomic(self.out_dir / "model_selection.csv",
                         ["model", "reference", "logz", "logz_err", "posterior_prob", "bayes_factor_vs_best",
                          "jeffreys_label", "nfe"], rows)
        best = report.best
        if best is not None:
            print(f"✅ Best model: {best.shorthand} (p = {best.posterior_prob:.3f})")
        return report

    @_ledgered("predict")
    def cmd_predict(self) -> np.ndarray:
        entry = self.config.models[0]
        if self.config.predict.archive:
            archive = Path(self.config.predict.archive)
        else:
            _, archive = self.infer_model(entry, entry.shorthand.lower())
        run = NestedRun.from_dict(read_json(archive)["run"])
        dataset = self.dataset()
        problem = self.build_problem(entry, dataset)
        if tuple(run.names) != problem.box.names:
            raise ConfigError(f"archive parameters {list(run.names)} do not match {entry.shorthand} "
                              f"with infer_structural={self.config.infer_structural}")

        draws = posterior_predictive(run, problem, self.config.predict.n_draws, self.config.seed)
        grid = problem.grid
        mean, std = draws.mean(axis=0), draws.std(axis=0)
        q05, q95 = np.quantile(draws, [0.05, 0.95], axis=0)
        rows = []
        for li, lane in enumerate(dataset.lanes):
            for k, t in enumerate(grid.t_coords):
                for j, x in enumerate(grid.x_coords):
                    i = li * grid.size + grid.index(k, j)
                    rows.append([lane.value, x, t, problem.y_obs[i], mean[i], std[i], q05[i], q95[i]])
        write_csv_atomic(self.out_dir / "predictive.csv",
                         ["lane", "sensor_x", "t", "y_obs", "mean", "std", "q05", "q95"], rows)
        print(f"✅ {draws.shape[0]} posterior predictive draws over N={draws.shape[1]}")
        return draws

    @_ledgered("sweep")
    def cmd_sweep(self) -> List[List]:
        s = self.config.sweep
        lo, hi = STRUCTURAL_BOUNDS["log10_Kv" if s.parameter == "log10_Kv" else "log10_Kr"]
        lo = lo if s.lower is None else s.lower
        hi = hi if s.upper is None else s.upper
        values = np.linspace(lo, hi, s.n_points)

        sensors = self.sensor_grid().x_coords
        beam = BeamModel(self.geometry, sensors)
        reach = max(t.axle_offsets[-1] for t in self.trucks)
        positions = np.linspace(0.0, self.geometry.total_length + reach, s.n_positions)
        rows = []
        for value in values:
            theta = ThetaS.from_dict({s.parameter: value}, base=self.theta_s)
            system = assemble(self.geometry, theta, beam.mesh)
            for truck in self.trucks:
                stress = beam.stress_matrix(theta, truck, positions, system=system)
                peak = stress[np.argmax(np.abs(stress), axis=0), np.arange(sensors.size)]
                rows.extend([value, truck.lane.value, x, p] for x, p in zip(sensors, peak))
        write_csv_atomic(self.out_dir / "sweep.csv", [s.parameter, "lane", "sensor_x", "peak_stress"], rows)
        print(f"✅ Swept {s.parameter} over {values.size} values")
        return rows

    @_ledgered("loglik-bench")
    def cmd_loglik_bench(self) -> List[Dict]:
        b = self.config.bench
        rng = np.random.default_rng(self.config.seed)
        values, timings = [], []
        for N in b.sizes:
            m = max(N // b.n_x, 1)
            grid = SpaceTimeGrid(10.0 * np.arange(1, b.n_x + 1), np.arange(m, dtype=float))
            T, X = np.meshgrid(grid.t_coords, grid.x_coords, indexing="ij")
            y_model = (10.0 + 5.0 * np.sin(T / 30.0) * np.cos(X / 20.0)).ravel()
            y_obs = y_model + rng.normal(0.0, 0.5, grid.size)
            for shorthand in b.models:
                spec = ProbModelSpec.from_shorthand(shorthand, b.theta)
                results = self._bench_paths(spec, grid, y_obs, y_model, b.repeats)
                for path, (value, mean_ms, rss_mb) in results.items():
                    values.append([grid.size, shorthand, path.value, value])
                    timings.append([grid.size, shorthand, path.value, mean_ms, rss_mb])
                    logger.info(f"bench N={grid.size} {shorthand} {path.value}: {mean_ms:.2f} ms")
        write_csv_atomic(self.out_dir / "bench_values.csv", ["N", "model", "path", "loglik"], values)
        write_csv_atomic(self.out_dir / "bench_timing.csv", ["N", "model", "path", "mean_ms", "peak_rss_mb"],
                         timings)
        print(f"✅ Benchmarked {len(b.sizes)} sizes x {len(b.models)} models")
        return [dict(zip(["N", "model", "path", "mean_ms"], row[:4])) for row in timings]

    def _bench_paths(self, spec: ProbModelSpec, grid: SpaceTimeGrid, y_obs: np.ndarray, y_model: np.ndarray,
                     repeats: int) -> Dict[LikelihoodPath, Tuple[float, float, float]]:
        expected = _expected_fast_path(spec)
        if expected is not None:
            chosen = choose_path(spec, grid, self.config.n_dense_max)
            if chosen is not expected:
                raise UnsupportedConfigurationError(
                    f"dispatch chose {chosen.value} for {spec.shorthand}, expected {expected.value}")

        runners = {}
        if expected is LikelihoodPath.MULTIPLICATIVE_FAST:
            runners[expected] = lambda: loglik_multiplicative_fast(y_obs, y_model, spec, grid)
        elif expected is LikelihoodPath.ADDITIVE_EIGEN:
            runners[expected] = lambda: loglik_additive_fast(y_obs, y_model, spec, grid)
        if grid.size <= self.config.n_dense_max:
            runners[LikelihoodPath.DENSE] = lambda: loglik_dense(
                y_obs, y_model, build_covariance_dense(spec, grid, y_model, self.config.n_dense_max))
        else:
            logger.info(f"bench N={grid.size}: dense path skipped above N_dense_max={self.config.n_dense_max}")

        out = {}
        for path, fn in runners.items():
            value = fn()
            start = time.perf_counter()
            for _ in range(repeats):
                fn()
            mean_ms = 1e3 * (time.perf_counter() - start) / repeats
            out[path] = (value, mean_ms, _peak_rss_mb())

        if expected in out and LikelihoodPath.DENSE in out:
            fast, dense = out[expected][0], out[LikelihoodPath.DENSE][0]
            if abs(fast - dense) > max(1e-6, 1e-9 * abs(dense)):
                logger.error(f"{spec.shorthand} N={grid.size}: fast {fast!r} != dense {dense!r}")
        return out

    @_ledgered("study")
    def cmd_study(self):
        st = self.config.study
        config = StudyConfig(
            grid_sizes=tuple(st.grid_sizes), ground_truth=st.ground_truth, theta_gt=dict(st.theta_gt),
            theta_s=self.theta_s, pool=tuple(st.pool), replicates=st.replicates, seed=self.config.seed,
            sampler=replace(self.sampler_config(), n_live=st.n_live, workers=1),
            geometry=self.geometry, trucks=self.trucks,
            sensor_spans=None if self.config.grid.sensor_spans is None else tuple(self.config.grid.sensor_spans),
            infer_structural=self.config.infer_structural, prior_overrides=dict(self.config.priors),
            workers=self.config.workers, n_dense_max=self.config.n_dense_max,
        )
        print(f"🚀 Study: {len(config.grid_sizes)} grids x {config.replicates} replicates x {len(config.pool)} models")
        report = run_study(config)
        write_dict_rows(self.out_dir / "study_evidence.csv", report.evidence)
        write_dict_rows(self.out_dir / "study_parameters.csv", report.parameters)
        write_json_atomic(self.out_dir / "study_summary.json", report.to_dict())
        for row in report.grids:
            self._record(f"study:{config.ground_truth}:grid{row['grid']}")
            print(f"  grid {row['grid']}: accuracy={row['accuracy']:.2f} p_gt={row['p_gt']:.3f}")

        if len(report.failures) > st.max_failures:
            raise StudyFailureError(f"{len(report.failures)} study cells failed (allowed {st.max_failures})")
        if report.failures:
            print(f"⚠️ {len(report.failures)} study cells failed; see study_summary.json")
        return report

    @staticmethod
    def _model_tags(entries) -> List[str]:
        seen: Dict[str, int] = {}
        tags = []
        for entry in entries:
            base = entry.shorthand.lower() + ("_ref" if entry.reference else "")
            seen[base] = seen.get(base, 0) + 1
            tags.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
        return tags


def _expected_fast_path(spec: ProbModelSpec) -> Optional[LikelihoodPath]:
    th = spec.theta_c
    if spec.error_structure is ErrorStructure.ADDITIVE:
        full_rank = is_independent(spec.kt, th.l_corr_t) and is_independent(spec.kx, th.l_corr_x)
        if spec.sigma_meas > 0.0 or (full_rank and spec.sigma_model > 0.0):
            return LikelihoodPath.ADDITIVE_EIGEN
        return None
    if spec.kt is KernelKind.RBF and not is_independent(spec.kt, th.l_corr_t):
        return None
    return LikelihoodPath.MULTIPLICATIVE_FAST if spec.sigma_meas > 0.0 else None
