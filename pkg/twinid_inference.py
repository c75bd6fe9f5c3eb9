#!/usr/bin/env python3
"""
Priors, static nested sampling, model selection and posterior prediction.

The sampler peels prior volume with the deterministic shrinkage
log X_k = -k / n_live, replaces the worst live point by a likelihood-constrained
random walk in the unit cube, and accumulates the evidence with the trapezoid
rule. Weighted dead + final live points form the posterior sample.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from twinid_beam import BeamModel, ThetaS, TruckLoad
from twinid_kernels import SpaceTimeGrid
from twinid_likelihood import ProbModelSpec, active_parameters, loglik_lanes, sample_data_model
from twinid_shared import (JEFFREYS_SCALE, N_DENSE_MAX, PROBABILISTIC_BOUNDS, STRUCTURAL_BOUNDS,
                           GeometryError, NoValidRegionError, ParameterDomainError, logger)

LOW_ACCEPTANCE = 0.05
ACCEPTANCE_WINDOW = 100
MAX_INIT_FACTOR = 100


# --- Priors ---

@dataclass(frozen=True)
class PriorBox:
    names: Tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (len(self.names),) or hi.shape != lo.shape:
            raise ParameterDomainError("prior bounds must match the parameter names")
        if np.any(~(lo < hi)):
            bad = [n for n, a, b in zip(self.names, lo, hi) if not a < b]
            raise ParameterDomainError(f"prior lower bound must be below upper bound for {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def contains(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def as_dict(self, theta: Sequence[float]) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, theta)}

    def bounds(self) -> Dict[str, Tuple[float, float]]:
        return {n: (float(a), float(b)) for n, a, b in zip(self.names, self.lower, self.upper)}


def prior_transform(u: np.ndarray, box: PriorBox) -> np.ndarray:
    return box.lower + np.asarray(u, dtype=float) * (box.upper - box.lower)


def default_prior_box(shorthand: str, infer_structural: bool = True,
                      overrides: Dict[str, Sequence[float]] = None, strict: bool = True) -> PriorBox:
    """Uniform box over theta_s (optional) and the shorthand's active theta_c.

    With strict=False, overrides naming parameters the model lacks are skipped
    (one override table shared by a whole model pool).
    """
    names, lower, upper = [], [], []
    if infer_structural:
        for name in ThetaS.NAMES:
            lo, hi = STRUCTURAL_BOUNDS["log10_Kv" if name == "log10_Kv" else "log10_Kr"]
            names.append(name)
            lower.append(lo)
            upper.append(hi)
    for name in active_parameters(shorthand):
        lo, hi = PROBABILISTIC_BOUNDS[name]
        names.append(name)
        lower.append(lo)
        upper.append(hi)
    for name, (lo, hi) in (overrides or {}).items():
        if name not in names:
            if not strict:
                continue
            raise ParameterDomainError(f"prior override for '{name}' which is not a parameter of {shorthand}")
        i = names.index(name)
        lower[i], upper[i] = float(lo), float(hi)
    return PriorBox(tuple(names), np.array(lower), np.array(upper))


# --- Nested sampling ---

@dataclass
class SamplerConfig:
    n_live: int = 500
    seed: int = 0
    dlogz: float = 0.01
    walk_steps: int = 25
    max_iter: int = 200_000
    workers: int = 1
    target_acceptance: float = 0.5


@dataclass
class NestedRun:
    names: Tuple[str, ...]
    samples: np.ndarray          # (n, d) parameter values
    logl: np.ndarray             # (n,)
    logwt: np.ndarray            # (n,) unnormalized log-weights
    logz: float
    logz_err: float
    information: float
    nfe: int
    n_live: int
    n_iter: int
    termination: str
    acceptance: float
    worker_count: int = 1
    seed: int = 0
    config: Dict = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)

    def weights(self) -> np.ndarray:
        w = np.exp(self.logwt - np.max(self.logwt))
        return w / w.sum()

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w ** 2))

    def mean(self) -> np.ndarray:
        return self.weights() @ self.samples

    def std(self) -> np.ndarray:
        w = self.weights()
        mu = w @ self.samples
        return np.sqrt(np.clip(w @ (self.samples - mu) ** 2, 0.0, None))

    def to_dict(self) -> Dict:
        return {
            "names": list(self.names),
            "samples": self.samples.tolist(),
            "logl": self.logl.tolist(),
            "logwt": self.logwt.tolist(),
            "logz": self.logz,
            "logz_err": self.logz_err,
            "information": self.information,
            "nfe": self.nfe,
            "n_live": self.n_live,
            "n_iter": self.n_iter,
            "termination": self.termination,
            "acceptance": self.acceptance,
            "worker_count": self.worker_count,
            "seed": self.seed,
            "config": self.config,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NestedRun":
        data = dict(data)
        data["names"] = tuple(data["names"])
        data["samples"] = np.asarray(data["samples"], dtype=float).reshape(-1, len(data["names"]))
        data["logl"] = np.asarray(data["logl"], dtype=float)
        data["logwt"] = np.asarray(data["logwt"], dtype=float)
        return cls(**data)


def _safe_loglik(loglik_fn: Callable[[np.ndarray], float], theta: np.ndarray) -> float:
    """Likelihood at theta, with out-of-domain points mapped to -inf.

    Configuration errors (no usable likelihood path, bad grid) propagate.
    """
    try:
        value = float(loglik_fn(theta))
    except (ParameterDomainError, GeometryError, np.linalg.LinAlgError) as e:
        logger.debug(f"loglik rejected {theta}: {e}")
        return -np.inf
    return value if not math.isnan(value) else -np.inf


def nested_sample(loglik_fn: Callable[[np.ndarray], float], box: PriorBox,
                  config: SamplerConfig = None) -> NestedRun:
    config = config or SamplerConfig()
    d, n_live = box.dim, config.n_live
    if n_live < 2 * d or n_live < 2:
        raise ParameterDomainError(f"n_live={n_live} must be at least 2 * dim = {2 * d}")
    rng = np.random.default_rng(config.seed)
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    nfe = 0

    def evaluate(U: np.ndarray) -> np.ndarray:
        thetas = [prior_transform(u, box) for u in U]
        if pool is not None:
            return np.array(list(pool.map(lambda th: _safe_loglik(loglik_fn, th), thetas)))
        return np.array([_safe_loglik(loglik_fn, th) for th in thetas])

    try:
        # Initial live points from the prior; -inf draws are redrawn.
        live_u = np.empty((n_live, d))
        live_logl = np.empty(n_live)
        filled = attempts = 0
        while filled < n_live:
            if attempts >= MAX_INIT_FACTOR * n_live:
                raise NoValidRegionError(
                    f"only {filled} of {n_live} prior draws had finite likelihood after {attempts} attempts")
            batch = rng.random((n_live - filled, d))
            logl = evaluate(batch)
            nfe += len(batch)
            attempts += len(batch)
            ok = np.isfinite(logl)
            k = int(ok.sum())
            live_u[filled:filled + k] = batch[ok]
            live_logl[filled:filled + k] = logl[ok]
            filled += k

        dead_u, dead_logl, dead_logwt = [], [], []
        logz = -np.inf
        logx = 0.0
        logl_prev = None
        scale = 1.0
        recent_acc: List[float] = []
        accepted_total = steps_total = 0
        diagnostics: List[str] = []
        termination = "max_iter"
        it = 0

        for it in range(config.max_iter):
            remaining = np.max(live_logl) + logx
            if np.isfinite(logz) and np.logaddexp(logz, remaining) - logz < config.dlogz:
                termination = "dlogz"
                break

            worst = int(np.argmin(live_logl))
            logl_star = live_logl[worst]
            logx_next = -(it + 1) / n_live
            logdx = logx + math.log1p(-math.exp(logx_next - logx))
            if logl_prev is None:
                logl_prev = logl_star
            logwt = np.logaddexp(logl_star, logl_prev) - math.log(2.0) + logdx
            logz = np.logaddexp(logz, logwt)
            dead_u.append(live_u[worst].copy())
            dead_logl.append(logl_star)
            dead_logwt.append(logwt)
            logl_prev = logl_star
            logx = logx_next

            # Constrained random walk from a random surviving live point.
            start = worst
            while start == worst and n_live > 1:
                start = int(rng.integers(n_live))
            u, logl_u = live_u[start].copy(), live_logl[start]
            spread = np.maximum(live_u.std(axis=0), 1e-9)
            n_acc = 0
            for _ in range(config.walk_steps):
                props = u + scale * spread * rng.standard_normal((max(config.workers, 1), d))
                inside = np.all((props >= 0.0) & (props <= 1.0), axis=1)
                logl_props = np.full(len(props), -np.inf)
                if inside.any():
                    logl_props[inside] = evaluate(props[inside])
                    nfe += int(inside.sum())
                hits = np.nonzero(inside & (logl_props >= logl_star))[0]
                if hits.size:
                    u, logl_u = props[hits[0]], logl_props[hits[0]]
                    n_acc += 1
            live_u[worst] = u
            live_logl[worst] = logl_u

            rate = n_acc / config.walk_steps
            accepted_total += n_acc
            steps_total += config.walk_steps
            scale *= math.exp(rate - config.target_acceptance)
            recent_acc.append(rate)
            if len(recent_acc) > ACCEPTANCE_WINDOW:
                recent_acc.pop(0)
            if (len(recent_acc) == ACCEPTANCE_WINDOW and np.mean(recent_acc) < LOW_ACCEPTANCE
                    and not diagnostics):
                msg = f"step adaptation failure: walk acceptance below {LOW_ACCEPTANCE:.0%} at iteration {it}"
                diagnostics.append(msg)
                logger.warning(msg)
            if it % 1000 == 0:
                logger.debug(f"nested sampling it={it} logz={logz:.3f} logl*={logl_star:.3f} scale={scale:.3g}")
        else:
            it = config.max_iter

        # Final live points share the remaining volume.
        order = np.argsort(live_logl, kind="stable")
        logdx = logx - math.log(n_live)
        for i in order:
            ll = live_logl[i]
            if logl_prev is None:
                logl_prev = ll
            logwt = np.logaddexp(ll, logl_prev) - math.log(2.0) + logdx
            logz = np.logaddexp(logz, logwt)
            dead_u.append(live_u[i].copy())
            dead_logl.append(ll)
            dead_logwt.append(logwt)
            logl_prev = ll
    finally:
        if pool is not None:
            pool.shutdown()

    U = np.array(dead_u)
    logl_arr = np.array(dead_logl)
    logwt_arr = np.array(dead_logwt)
    logz = float(logsumexp(logwt_arr))
    p = np.exp(logwt_arr - logz)
    information = float(np.sum(p * logl_arr) - logz)
    samples = np.array([prior_transform(u, box) for u in U])
    return NestedRun(
        names=box.names,
        samples=samples,
        logl=logl_arr,
        logwt=logwt_arr,
        logz=logz,
        logz_err=math.sqrt(max(information, 0.0) / n_live),
        information=information,
        nfe=nfe,
        n_live=n_live,
        n_iter=it,
        termination=termination,
        acceptance=accepted_total / steps_total if steps_total else 0.0,
        worker_count=config.workers,
        seed=config.seed,
        config=asdict(config),
        diagnostics=diagnostics,
    )


# --- Model selection ---

def model_posteriors(logzs: Sequence[float], prior_probs: Sequence[float] = None) -> np.ndarray:
    logzs = np.asarray(logzs, dtype=float)
    if prior_probs is None:
        prior_probs = np.full(logzs.size, 1.0 / logzs.size)
    prior_probs = np.asarray(prior_probs, dtype=float)
    if prior_probs.shape != logzs.shape:
        raise ParameterDomainError("prior probabilities must match the number of models")
    if abs(prior_probs.sum() - 1.0) > 1e-9:
        raise ParameterDomainError("prior model probabilities must sum to 1")
    with np.errstate(divide="ignore"):
        lp = logzs + np.log(prior_probs)
    return np.exp(lp - logsumexp(lp))


def jeffreys_label(R: float) -> str:
    if R < 1.0:
        return "Negative"
    for threshold, label in JEFFREYS_SCALE:
        if R >= threshold:
            return label
    return "Barely worth mentioning"


def bayes_factor(logz1: float, logz2: float, prior1: float = 0.5, prior2: float = 0.5) -> Tuple[float, str]:
    """R = [p(M1|y) / p(M2|y)] * [p(M2) / p(M1)]; the model priors cancel to Z1 / Z2."""
    log_post_ratio = (logz1 + math.log(prior1)) - (logz2 + math.log(prior2))
    log_r = log_post_ratio + math.log(prior2) - math.log(prior1)
    R = math.exp(log_r) if log_r < 700.0 else math.inf
    return R, jeffreys_label(R)


@dataclass
class ModelEvidence:
    shorthand: str
    logz: float
    logz_err: float
    nfe: int
    reference: bool = False
    posterior_prob: float = float("nan")
    bayes_factor_vs_best: float = float("nan")
    jeffreys_label: str = ""


@dataclass
class ModelSelectionReport:
    models: List[ModelEvidence]

    @property
    def best(self) -> Optional[ModelEvidence]:
        pool = [m for m in self.models if not m.reference]
        return max(pool, key=lambda m: m.logz) if pool else None


def select_models(entries: Sequence[ModelEvidence], prior_probs: Sequence[float] = None) -> ModelSelectionReport:
    """Posterior probabilities and Bayes factors (best vs each) over non-reference models."""
    entries = list(entries)
    pool = [m for m in entries if not m.reference]
    if pool:
        probs = model_posteriors([m.logz for m in pool], prior_probs)
        best = max(pool, key=lambda m: m.logz)
        for m, p in zip(pool, probs):
            m.posterior_prob = float(p)
            m.bayes_factor_vs_best, m.jeffreys_label = bayes_factor(best.logz, m.logz)
    return ModelSelectionReport(entries)


def map_estimate(run: NestedRun, box: PriorBox = None) -> np.ndarray:
    """Sample-based MAP: the uniform prior makes it the max-likelihood sample (first on ties)."""
    if run.samples.shape[0] == 0:
        raise ParameterDomainError("empty nested sampling run")
    score = run.logl.copy()
    if box is not None:
        score = score - box.log_volume
    return run.samples[int(np.argmax(score))].copy()


def weighted_hdi(values: np.ndarray, weights: np.ndarray, mass: float = 0.9) -> Tuple[float, float]:
    """Shortest interval holding `mass` of the weighted sample."""
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    w = w / w.sum()
    cw = np.cumsum(w)
    start_mass = cw - w
    j = np.searchsorted(cw, start_mass + mass - 1e-12, side="left")
    valid = j < v.size
    if not valid.any():
        return float(v[0]), float(v[-1])
    i = np.nonzero(valid)[0]
    widths = v[j[i]] - v[i]
    best = int(np.argmin(widths))
    return float(v[i[best]]), float(v[j[i[best]]])


def summarize_run(run: NestedRun, mass: float = 0.9) -> List[Dict[str, float]]:
    w = run.weights()
    mean, std = run.mean(), run.std()
    theta_map = map_estimate(run)
    rows = []
    for k, name in enumerate(run.names):
        lo, hi = weighted_hdi(run.samples[:, k], w, mass)
        rows.append({"parameter": name, "mean": float(mean[k]), "std": float(std[k]),
                     "hdi_low": lo, "hdi_high": hi, "map": float(theta_map[k])})
    return rows


# --- Identification problem: theta -> (spec, y_model) -> loglik ---

class IdentificationProblem:
    """Couples one probabilistic model with the beam model (or a fixed response) on a dataset."""

    def __init__(self, shorthand: str, grid: SpaceTimeGrid, y_obs: Optional[np.ndarray],
                 box: PriorBox, n_lanes: int = 1, beam: BeamModel = None,
                 trucks: Sequence[TruckLoad] = (), theta_s: ThetaS = None,
                 y_model: np.ndarray = None, fixed_theta_c: Dict[str, float] = None,
                 n_dense_max: int = N_DENSE_MAX):
        self.shorthand = shorthand.upper()
        self.grid = grid
        self.y_obs = None if y_obs is None else np.asarray(y_obs, dtype=float).ravel()
        self.box = box
        self.n_lanes = n_lanes
        self.beam = beam
        self.trucks = tuple(trucks)
        self.theta_s = theta_s or ThetaS()
        self.fixed_theta_c = dict(fixed_theta_c or {})
        self.n_dense_max = n_dense_max
        self.infers_structural = any(n in ThetaS.NAMES for n in box.names)
        if self.infers_structural and beam is None:
            raise ParameterDomainError("structural parameters are inferred but no beam model was given")
        self._y_model = None if y_model is None else np.asarray(y_model, dtype=float).ravel()
        if self._y_model is None and not self.infers_structural:
            if beam is None:
                raise ParameterDomainError("either a fixed y_model or a beam model is required")
            self._y_model = self.beam.response(self.theta_s, self.trucks, grid)

    def split(self, theta: Sequence[float]) -> Tuple[ProbModelSpec, ThetaS]:
        values = self.box.as_dict(theta)
        theta_s = ThetaS.from_dict(values, base=self.theta_s)
        theta_c = dict(self.fixed_theta_c)
        theta_c.update({k: v for k, v in values.items() if k not in ThetaS.NAMES})
        return ProbModelSpec.from_shorthand(self.shorthand, theta_c), theta_s

    def y_model(self, theta_s: ThetaS) -> np.ndarray:
        if self._y_model is not None and not self.infers_structural:
            return self._y_model
        return self.beam.response(theta_s, self.trucks, self.grid)

    def loglik(self, theta: Sequence[float]) -> float:
        spec, theta_s = self.split(theta)
        return loglik_lanes(self.y_obs, self.y_model(theta_s), spec, self.grid, self.n_lanes, self.n_dense_max)


def posterior_predictive(run: NestedRun, problem: IdentificationProblem, n_draws: int,
                         seed: int = 0) -> np.ndarray:
    """Draws of y* (n_draws, n_lanes * N) marginalized over the weighted posterior."""
    if run.samples.shape[0] == 0:
        raise ParameterDomainError("empty nested sampling run")
    rng = np.random.default_rng(seed)
    picks = rng.choice(run.samples.shape[0], size=n_draws, p=run.weights())
    N = problem.grid.size
    out = np.empty((n_draws, problem.n_lanes * N))
    for row, idx in enumerate(picks):
        spec, theta_s = problem.split(run.samples[idx])
        y_model = problem.y_model(theta_s).reshape(problem.n_lanes, N)
        for lane in range(problem.n_lanes):
            out[row, lane * N:(lane + 1) * N] = sample_data_model(
                spec, problem.grid, y_model[lane], rng, 1, problem.n_dense_max)[0]
    return out
