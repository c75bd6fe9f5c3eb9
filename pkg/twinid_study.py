#!/usr/bin/env python3
"""
Synthetic identification study: draw datasets from a ground-truth error model
on refining sensor grids, infer every pool model on each dataset, and
aggregate evidence, MAP accuracy and identification accuracy.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from twinid_beam import BeamGeometry, BeamModel, ThetaS, TruckLoad, default_trucks
from twinid_inference import (IdentificationProblem, SamplerConfig, default_prior_box, map_estimate,
                              model_posteriors, nested_sample)
from twinid_kernels import SpaceTimeGrid
from twinid_likelihood import MODEL_CATALOG, ProbModelSpec, sample_data_model
from twinid_shared import N_DENSE_MAX, ConfigError, GridError, TwinIDError, logger

DEFAULT_THETA_GT = {"C_v": 0.1, "sigma_model": 1.0, "sigma_meas": 0.2, "l_corr_t": 20.0, "l_corr_x": 30.0}
DEFAULT_POOL = ("IID-A", "EXP-A", "IID-M", "EXP-M")


@dataclass
class StudyConfig:
    grid_sizes: Tuple[int, ...] = (1, 2, 3, 5, 8)
    ground_truth: str = "EXP-A"
    theta_gt: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THETA_GT))
    theta_s: ThetaS = field(default_factory=ThetaS)
    pool: Tuple[str, ...] = DEFAULT_POOL
    replicates: int = 10
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(n_live=100))
    geometry: BeamGeometry = field(default_factory=BeamGeometry)
    trucks: Tuple[TruckLoad, ...] = None
    sensor_spans: Optional[Tuple[int, ...]] = None
    infer_structural: bool = False
    prior_overrides: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    workers: int = 1
    n_dense_max: int = N_DENSE_MAX

    def __post_init__(self):
        self.ground_truth = self.ground_truth.upper()
        self.pool = tuple(m.upper() for m in self.pool)
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not self.pool:
            raise ConfigError("model pool must not be empty")
        unknown = [m for m in self.pool if m not in MODEL_CATALOG]
        if unknown:
            raise ConfigError(f"unknown models in pool: {unknown}")
        if self.ground_truth not in self.pool:
            raise ConfigError(f"ground truth {self.ground_truth} is not in the pool {list(self.pool)}")
        if any(n < 1 for n in self.grid_sizes):
            raise ConfigError("grid sizes must be at least 1")
        if self.trucks is None:
            self.trucks = default_trucks(self.geometry)

    def echo(self) -> Dict:
        return {
            "grid_sizes": list(self.grid_sizes),
            "ground_truth": self.ground_truth,
            "theta_gt": dict(self.theta_gt),
            "theta_s": self.theta_s.as_dict(),
            "pool": list(self.pool),
            "replicates": self.replicates,
            "seed": self.seed,
            "sampler": asdict(self.sampler),
            "sensor_spans": None if self.sensor_spans is None else list(self.sensor_spans),
            "infer_structural": self.infer_structural,
            "n_lanes": len(self.trucks),
            "workers": self.workers,
        }


@dataclass
class StudyReport:
    evidence: List[Dict]      # one row per grid x model
    parameters: List[Dict]    # one row per grid x ground-truth parameter
    grids: List[Dict]         # one row per grid: p_gt, accuracy
    failures: List[Dict]
    config: Dict

    @property
    def incomplete(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> Dict:
        return {"config": self.config, "grids": self.grids, "evidence": self.evidence,
                "parameters": self.parameters, "failures": self.failures}


def make_sensor_grid(n_x: int, n_t: int, geometry: BeamGeometry = None,
                     spans: Sequence[int] = None) -> SpaceTimeGrid:
    """n_x sensors inside each span at k * L_span / (n_x + 1); n_t interior load positions."""
    if n_x < 1 or n_t < 1:
        raise GridError("n_x and n_t must be at least 1")
    geometry = geometry or BeamGeometry()
    spans = range(len(geometry.span_lengths)) if spans is None else spans
    sensors = []
    for s in spans:
        a, b = geometry.span_bounds(s)
        sensors.extend(a + (b - a) * k / (n_x + 1) for k in range(1, n_x + 1))
    L = geometry.total_length
    loads = [L * k / (n_t + 1) for k in range(1, n_t + 1)]
    return SpaceTimeGrid(np.array(sorted(sensors)), np.array(loads))


def sample_synthetic(spec: ProbModelSpec, grid: SpaceTimeGrid, y_model: np.ndarray, seed: int,
                     n_lanes: int = 1, n_dense_max: int = N_DENSE_MAX) -> np.ndarray:
    """One seeded draw from the data model; lane blocks are independent."""
    rng = np.random.default_rng(seed)
    blocks = np.asarray(y_model, dtype=float).reshape(n_lanes, grid.size)
    return np.concatenate([sample_data_model(spec, grid, block, rng, 1, n_dense_max)[0] for block in blocks])


def _cell_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _relative_error(estimate: float, truth: float) -> float:
    return abs(estimate - truth) / abs(truth) if truth != 0.0 else abs(estimate)


def run_study(config: StudyConfig) -> StudyReport:
    n_lanes = len(config.trucks)
    gt_spec = ProbModelSpec.from_shorthand(config.ground_truth, config.theta_gt)
    gt_values = dict(gt_spec.theta_c.as_dict())
    if config.infer_structural:
        gt_values.update(config.theta_s.as_dict())

    setups = {}
    for n in config.grid_sizes:
        grid = make_sensor_grid(n, n, config.geometry, config.sensor_spans)
        beam = BeamModel(config.geometry, grid.x_coords)
        y_model = beam.response(config.theta_s, config.trucks, grid)
        setups[n] = (grid, beam, y_model)
        logger.debug(f"study grid {n}: N={grid.size} per lane, {n_lanes} lanes")

    datasets = {}
    for n in config.grid_sizes:
        grid, _, y_model = setups[n]
        for r in range(config.replicates):
            datasets[n, r] = sample_synthetic(gt_spec, grid, y_model, _cell_seed(config.seed, n, r),
                                              n_lanes, config.n_dense_max)

    def run_cell(key):
        n, r, m_idx = key
        shorthand = config.pool[m_idx]
        grid, beam, y_model = setups[n]
        box = default_prior_box(shorthand, config.infer_structural, config.prior_overrides, strict=False)
        problem = IdentificationProblem(shorthand, grid, datasets[n, r], box, n_lanes=n_lanes, beam=beam,
                                        trucks=config.trucks, theta_s=config.theta_s,
                                        y_model=None if config.infer_structural else y_model,
                                        n_dense_max=config.n_dense_max)
        sampler = replace(config.sampler, seed=_cell_seed(config.seed, n, r, m_idx, 1), workers=1)
        run = nested_sample(problem.loglik, box, sampler)
        logger.debug(f"study grid={n} rep={r} {shorthand}: logZ={run.logz:.3f} nfe={run.nfe}")
        return {"logz": run.logz, "map": box.as_dict(map_estimate(run)), "nfe": run.nfe}

    keys = [(n, r, m) for n in config.grid_sizes for r in range(config.replicates) for m in range(len(config.pool))]
    results: Dict[Tuple[int, int, int], Dict] = {}
    failures: List[Dict] = []

    def guarded(key):
        try:
            return key, run_cell(key), None
        except TwinIDError as e:
            return key, None, str(e)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(guarded, keys))
    else:
        outcomes = [guarded(k) for k in keys]
    for key, result, error in outcomes:
        if error is None:
            results[key] = result
        else:
            n, r, m = key
            logger.warning(f"study cell grid={n} rep={r} model={config.pool[m]} failed: {error}")
            failures.append({"grid": n, "replicate": r, "model": config.pool[m], "error": error})

    return _aggregate(config, setups, results, failures, gt_values, n_lanes)


def _aggregate(config: StudyConfig, setups, results, failures, gt_values, n_lanes) -> StudyReport:
    gt_idx = config.pool.index(config.ground_truth)
    evidence, parameters, grids = [], [], []
    for n in config.grid_sizes:
        grid = setups[n][0]
        log_mean = []
        rows = []
        for m_idx, shorthand in enumerate(config.pool):
            logzs = np.array([results[n, r, m_idx]["logz"] for r in range(config.replicates)
                              if (n, r, m_idx) in results])
            lme = float(logsumexp(logzs) - math.log(logzs.size)) if logzs.size else float("nan")
            log_mean.append(lme)
            rows.append({
                "grid": n, "N": grid.size * n_lanes, "model": shorthand,
                "n_ok": int(logzs.size), "n_failed": config.replicates - int(logzs.size),
                "log_mean_evidence": lme,
                "mean_logz": float(logzs.mean()) if logzs.size else float("nan"),
            })

        finite = [i for i, v in enumerate(log_mean) if np.isfinite(v)]
        probs = np.full(len(config.pool), float("nan"))
        if finite:
            p = model_posteriors([log_mean[i] for i in finite])
            probs[finite] = p
        for row, prob in zip(rows, probs):
            row["posterior_prob"] = float(prob)

        scored = hits = 0
        for r in range(config.replicates):
            cell = [results.get((n, r, m)) for m in range(len(config.pool))]
            if any(c is None for c in cell):
                continue
            scored += 1
            logzs = [c["logz"] for c in cell]
            hits += int(int(np.argmax(logzs)) == gt_idx)
        accuracy = hits / scored if scored else float("nan")
        p_gt = float(probs[gt_idx])
        for row in rows:
            row["p_gt"] = p_gt
            row["accuracy"] = accuracy
            row["incomplete"] = row["n_failed"] > 0
        evidence.extend(rows)
        grids.append({"grid": n, "N": grid.size * n_lanes, "p_gt": p_gt, "accuracy": accuracy,
                      "replicates_scored": scored})

        maps = [results[n, r, gt_idx]["map"] for r in range(config.replicates) if (n, r, gt_idx) in results]
        for name, truth in gt_values.items():
            values = np.array([m[name] for m in maps if name in m])
            if values.size == 0:
                continue
            mean_map = float(values.mean())
            parameters.append({
                "grid": n, "parameter": name, "ground_truth": float(truth), "mean_map": mean_map,
                "rel_error": _relative_error(mean_map, truth),
                "cov": float(values.std() / abs(mean_map)) if mean_map != 0.0 else float("nan"),
            })
    return StudyReport(evidence, parameters, grids, failures, config.echo())
