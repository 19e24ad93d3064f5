"""Test protocol: unseen instances, absolute-error statistics and per-step timing."""
from __future__ import annotations

import csv
import gc
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import process as ps
from .ekf import EkfConfig, FilterError, filter_params, run_filter
from .transformer import (ModelConfig, MetaFilter, NonFiniteActivation, Standardizer,
                          Weights, estimate_batch)

log = logging.getLogger(__name__)

ESTIMATOR_NAMES = ("meta", "oracle_ekf", "enlarged_ekf", "constant")
# Failures an estimator may raise on a single instance; anything else is a bug.
INSTANCE_FAILURES = (FilterError, ps.SimulationDivergence, NonFiniteActivation,
                     np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class EvalConfig:
    n_test: int = 100
    N: int = 500
    transient_cutoff: int = 50
    estimators: Tuple[str, ...] = ("meta", "oracle_ekf", "enlarged_ekf")
    seed: int = 1
    deployment: str = "streaming"
    checkpoint: Optional[str] = None
    max_failure_frac: float = 0.1

    def __post_init__(self):
        if self.n_test < 1 or self.N < 1:
            raise ValueError("n_test and N must be >= 1")
        if not 0 <= self.transient_cutoff < self.N:
            raise ValueError("transient_cutoff must lie in [0, N)")
        if self.deployment not in ("streaming", "batch"):
            raise ValueError("deployment must be 'streaming' or 'batch'")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}; choose from {ESTIMATOR_NAMES}")


# --- estimators ----------------------------------------------------------------

class Estimator:
    """Maps one trajectory to ``(estimates (N, 2), latency_s (N,))``."""

    name = "estimator"

    def run(self, traj: ps.Trajectory) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class MetaEstimator(Estimator):
    def __init__(self, w: Weights, cfg: ModelConfig, std: Standardizer,
                 deployment: str = "streaming", name: str = "meta"):
        self.w, self.cfg, self.std = w, cfg, std
        self.deployment = deployment
        self.name = name

    def run(self, traj):
        if self.deployment == "batch":
            t0 = time.perf_counter()
            est = estimate_batch(self.w, self.cfg, self.std, traj.inputs, traj.outputs)
            per_step = (time.perf_counter() - t0) / len(traj)
            return est, np.full(len(traj), per_step)
        mf = MetaFilter(self.w, self.cfg, self.std)
        N = len(traj)
        est = np.empty((N, self.cfg.n_x))
        lat = np.empty(N)
        clock = time.perf_counter
        for k in range(N):
            t0 = clock()
            est[k] = mf.step(traj.inputs[k], traj.outputs[k])
            lat[k] = clock() - t0
        return est, lat


class EkfEstimator(Estimator):
    def __init__(self, cfg: EkfConfig, nominal: ps.ProcessParams = ps.NOMINAL, name: Optional[str] = None):
        self.cfg, self.nominal = cfg, nominal
        self.name = name or f"{cfg.mode}_ekf"

    def run(self, traj):
        res = run_filter(traj.inputs, traj.outputs, self.cfg,
                         filter_params(self.cfg, traj.params, self.nominal))
        return res.estimates[:, :2], res.latency_s


class ConstantEstimator(Estimator):
    """Always returns the same state (the nominal steady state by default)."""

    def __init__(self, value=ps.X_SS, name: str = "constant"):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name

    def run(self, traj):
        return np.tile(self.value, (len(traj), 1)), np.zeros(len(traj))


class FunctionEstimator(Estimator):
    def __init__(self, name: str, fn: Callable[[ps.Trajectory], np.ndarray]):
        self.name, self.fn = name, fn

    def run(self, traj):
        return np.asarray(self.fn(traj), dtype=np.float64), np.zeros(len(traj))


def time_estimator(estimator: Estimator, traj: ps.Trajectory) -> np.ndarray:
    """Per-step wall-clock latency (s) of one run, garbage collector paused."""
    enabled = gc.isenabled()
    gc.disable()
    try:
        return estimator.run(traj)[1]
    finally:
        if enabled:
            gc.enable()


# --- statistics ---------------------------------------------------------------

def instance_seeds(seed: int, n: int) -> List[int]:
    return [ps.trajectory_seed(seed, i, ps.STREAM_TEST) for i in range(n)]


def make_test_set(cfg: EvalConfig, prior: ps.ClassPrior = ps.ClassPrior(),
                  noise: ps.NoiseSpec = ps.NoiseSpec()) -> List[ps.Trajectory]:
    """Unseen instances; a diverged seed is replaced by its next attempt."""
    out = []
    for i in range(cfg.n_test):
        attempt = 0
        while True:
            s = ps.trajectory_seed(cfg.seed, i, ps.STREAM_TEST, attempt)
            trajs, ok = ps.simulate_batch(prior, noise, cfg.N, [s])
            if ok[0]:
                out.append(trajs[0])
                break
            attempt += 1
    return out


def aggregate_stats(values) -> Dict[str, float]:
    """Boxplot ingredients of a flat sample."""
    v = np.asarray(values, dtype=np.float64).ravel()
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()),
            "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v.max())}


@dataclass
class EstimatorReport:
    name: str
    error_mean: np.ndarray        # (N, 2) mean over instances of |x - x_hat|
    error_std: np.ndarray         # (N, 2)
    aggregate: Dict[str, Dict[str, float]]   # "x1"/"x2" -> stats over time x instances
    latency_mean_ms: np.ndarray   # (N,) per step, over instances
    latency_std_ms: np.ndarray
    latency_ms_mean: float        # over instances and steps >= 1
    latency_ms_std: float
    rmse_post_transient: float
    mae_post_transient: Tuple[float, float]
    failures: int
    n_ok: int
    latency_median_ms: Optional[np.ndarray] = None   # (N,) per step, median over instances

    def summary(self) -> dict:
        return {
            "rmse_post_transient": self.rmse_post_transient,
            "mae_x1": self.aggregate["x1"]["mean"],
            "mae_x2": self.aggregate["x2"]["mean"],
            "mae_x1_post_transient": self.mae_post_transient[0],
            "mae_x2_post_transient": self.mae_post_transient[1],
            "latency_ms_mean": self.latency_ms_mean,
            "latency_ms_std": self.latency_ms_std,
            "failures": self.failures,
        }


@dataclass
class EvalReport:
    N: int
    n_test: int
    transient_cutoff: int
    seeds: List[int]
    estimators: Dict[str, EstimatorReport] = field(default_factory=dict)


def summarize(name: str, errors: Sequence[np.ndarray], latencies: Sequence[np.ndarray],
              failures: int, N: int, cutoff: int) -> EstimatorReport:
    """Statistics for one estimator from per-instance |error| (N, 2) and latency (N,) arrays."""
    if not errors:
        nan2 = np.full((N, 2), np.nan)
        nanstat = {k: float("nan") for k in ("mean", "std", "min", "q1", "median", "q3", "max")}
        return EstimatorReport(name, nan2, nan2.copy(), {"x1": nanstat, "x2": dict(nanstat)},
                               np.full(N, np.nan), np.full(N, np.nan), float("nan"), float("nan"),
                               float("nan"), (float("nan"), float("nan")), failures, 0)
    E = np.stack(errors)                      # (n, N, 2)
    L = np.stack(latencies) * 1e3             # (n, N) ms
    post = E[:, cutoff:]
    return EstimatorReport(
        name=name,
        error_mean=E.mean(0),
        error_std=E.std(0),
        aggregate={"x1": aggregate_stats(E[..., 0]), "x2": aggregate_stats(E[..., 1])},
        latency_mean_ms=L.mean(0),
        latency_std_ms=L.std(0),
        latency_ms_mean=float(L[:, 1:].mean()) if N > 1 else float(L.mean()),
        latency_ms_std=float(L[:, 1:].std()) if N > 1 else float(L.std()),
        rmse_post_transient=float(np.sqrt(np.mean(post ** 2))),
        mae_post_transient=(float(post[..., 0].mean()), float(post[..., 1].mean())),
        failures=failures,
        n_ok=len(errors),
        latency_median_ms=np.median(L, axis=0),
    )


def evaluate_estimators(estimators: Sequence[Estimator], trajs: Sequence[ps.Trajectory],
                        cutoff: int = 50, seeds: Optional[List[int]] = None) -> EvalReport:
    """Run each estimator on each trajectory and compare with the noise-free states."""
    if not estimators:
        raise ValueError("no estimators to evaluate")
    if not trajs:
        raise ValueError("empty test set")
    N = len(trajs[0])
    report = EvalReport(N, len(trajs), cutoff, seeds or [t.seed for t in trajs])
    for est in estimators:
        errors, lats, failures = [], [], 0
        for tr in trajs:
            try:
                lat = None
                enabled = gc.isenabled()
                gc.disable()
                try:
                    xhat, lat = est.run(tr)
                finally:
                    if enabled:
                        gc.enable()
                if not np.all(np.isfinite(xhat)):
                    raise FloatingPointError("non-finite estimate")
            except INSTANCE_FAILURES as exc:
                log.warning("%s failed on instance seed %d: %s", est.name, tr.seed, exc)
                failures += 1
                continue
            errors.append(np.abs(tr.clean_states - xhat[:, :2]))
            lats.append(lat)
        report.estimators[est.name] = summarize(est.name, errors, lats, failures, N, cutoff)
    return report


def build_estimators(cfg: EvalConfig, meta: Optional[tuple] = None,
                     oracle_cfg: EkfConfig = EkfConfig.oracle(),
                     enlarged_cfg: EkfConfig = EkfConfig.enlarged(),
                     nominal: ps.ProcessParams = ps.NOMINAL) -> List[Estimator]:
    out = []
    for name in cfg.estimators:
        if name == "meta":
            if meta is None:
                raise ValueError("the meta estimator needs a checkpoint")
            w, mcfg, std = meta
            out.append(MetaEstimator(w, mcfg, std, cfg.deployment))
        elif name == "oracle_ekf":
            out.append(EkfEstimator(oracle_cfg, nominal, name="oracle_ekf"))
        elif name == "enlarged_ekf":
            out.append(EkfEstimator(enlarged_cfg, nominal, name="enlarged_ekf"))
        elif name == "constant":
            out.append(ConstantEstimator(np.asarray(ps.X_SS)))
    return out


def evaluate(cfg: EvalConfig, meta: Optional[tuple] = None,
             prior: ps.ClassPrior = ps.ClassPrior(), noise: ps.NoiseSpec = ps.NoiseSpec(),
             oracle_cfg: EkfConfig = EkfConfig.oracle(),
             enlarged_cfg: EkfConfig = EkfConfig.enlarged()) -> EvalReport:
    """Full protocol; ``meta`` is ``(weights, model_config, standardizer)`` when "meta" is requested."""
    ests = build_estimators(cfg, meta, oracle_cfg, enlarged_cfg, prior.nominal)
    if not ests:
        raise ValueError("estimator list is empty")
    trajs = make_test_set(cfg, prior, noise)
    return evaluate_estimators(ests, trajs, cfg.transient_cutoff, [t.seed for t in trajs])


# --- export --------------------------------------------------------------------

AGG_HEADER = ("estimator", "state", "mean", "std", "min", "q1", "median", "q3", "max")


def _fmt(v: float) -> str:
    return repr(float(v))


def export_report(report: EvalReport, out_dir) -> Dict[str, Path]:
    """Write error_x1.csv, error_x2.csv, aggregate.csv, timing.csv and summary.json."""
    names = list(report.estimators)
    if not names:
        raise ValueError("report has no estimators; nothing to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for j, state in enumerate(("x1", "x2")):
        p = out / f"error_{state}.csv"
        with open(p, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t"] + [f"{n}_{s}" for n in names for s in ("mean", "std")])
            for t in range(report.N):
                row = [t]
                for n in names:
                    r = report.estimators[n]
                    row += [_fmt(r.error_mean[t, j]), _fmt(r.error_std[t, j])]
                wr.writerow(row)
        paths[f"error_{state}"] = p

    p = out / "aggregate.csv"
    with open(p, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(AGG_HEADER)
        for n in names:
            for state in ("x1", "x2"):
                st = report.estimators[n].aggregate[state]
                wr.writerow([n, state] + [_fmt(st[k]) for k in AGG_HEADER[2:]])
    paths["aggregate"] = p

    p = out / "timing.csv"
    with open(p, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"{n}_{s}_ms" for n in names for s in ("mean", "std")])
        for t in range(report.N):
            row = [t]
            for n in names:
                r = report.estimators[n]
                row += [_fmt(r.latency_mean_ms[t]), _fmt(r.latency_std_ms[t])]
            wr.writerow(row)
    paths["timing"] = p

    p = out / "summary.json"
    summary = {n: report.estimators[n].summary() for n in names}
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths["summary"] = p
    return paths


def read_series_csv(path) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Parse error_x*.csv or timing.csv back into ``(t, {column: values})``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    t = np.array([int(r[0]) for r in body])
    cols = {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header) if i}
    return t, cols


def read_aggregate_csv(path) -> Dict[Tuple[str, str], Dict[str, float]]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return {(r["estimator"], r["state"]): {k: float(r[k]) for k in AGG_HEADER[2:]} for r in rd}


def export_estimates(path, estimates) -> None:
    """Per-instance estimate sequence: columns ``t,x1_hat,x2_hat``."""
    est = np.asarray(estimates)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("t", "x1_hat", "x2_hat"))
        for t, row in enumerate(est):
            wr.writerow([t, _fmt(row[0]), _fmt(row[1])])
