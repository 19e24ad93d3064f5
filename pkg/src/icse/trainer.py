"""Stochastic-gradient training of the meta-filter on freshly simulated batches.

Every iteration draws ``batch_size`` new plant instances, inputs and noise
realisations from the class prior, so no trajectory is ever seen twice.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import process as ps
from .checkpoint import save_checkpoint
from .transformer import (ModelConfig, Standardizer, Weights, init_weights, loss,
                          loss_and_grad, zeros_like)

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "loss", "rmse", "lr", "elapsed_s")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, checkpoint: Optional[Path]):
        self.iteration = iteration
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at iteration {iteration}; "
                         f"last good checkpoint: {checkpoint}")


@dataclass(frozen=True)
class TrainConfig:
    n_itr: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_iters: int = 200
    min_lr_frac: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    n_calib: int = 1024
    # > 0: training windows may also start mid-trajectory, as they do under
    # sliding-window deployment (e.g. 372 = 500-sample horizon - desk n_ctx)
    max_window_offset: int = 0
    anchored_frac: float = 0.25
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        n_layers=4, n_heads=4, n_ctx=128, d_filter=64))
    prior: ps.ClassPrior = field(default_factory=ps.ClassPrior)
    noise: ps.NoiseSpec = field(default_factory=ps.NoiseSpec)

    def __post_init__(self):
        if self.n_itr < 1:
            raise ValueError("n_itr must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.warmup_iters < 0 or self.grad_clip <= 0:
            raise ValueError("warmup_iters must be >= 0 and grad_clip > 0")
        if self.max_window_offset < 0 or not 0.0 <= self.anchored_frac <= 1.0:
            raise ValueError("max_window_offset must be >= 0 and anchored_frac in [0, 1]")


@dataclass
class TrainLogRecord:
    iter: int
    loss: float
    rmse: float
    lr: float
    elapsed_s: float


@dataclass
class AdamState:
    m: Weights
    v: Weights
    t: int = 0

    @classmethod
    def zeros(cls, w: Weights) -> "AdamState":
        return cls(zeros_like(w), zeros_like(w), 0)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Linear warm-up to ``learning_rate`` then cosine decay to ``min_lr_frac`` of it."""
    base = cfg.learning_rate
    if iteration < cfg.warmup_iters:
        return base * (iteration + 1) / cfg.warmup_iters
    span = max(1, cfg.n_itr - cfg.warmup_iters)
    progress = min(1.0, (iteration - cfg.warmup_iters) / span)
    lo = cfg.min_lr_frac * base
    return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Weights) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Weights, max_norm: float) -> Weights:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(w: Weights, grads: Weights, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0, grad_clip: Optional[float] = None) -> Weights:
    """One AdamW update (decoupled weight decay); updates ``state`` in place."""
    if grad_clip is not None:
        grads = clip_gradients(grads, grad_clip)
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    new = {}
    for k, p in w.items():
        g = grads[k]
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new[k] = p - lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)
    return new


# --- data -------------------------------------------------------------------

def window_offset(cfg: TrainConfig, seed: int) -> int:
    """Start of the training window within trajectory ``seed``.

    With probability ``anchored_frac`` the window starts at the initial
    condition, otherwise uniformly in ``1..max_window_offset``.
    """
    if cfg.max_window_offset == 0:
        return 0
    rng = np.random.default_rng([int(seed), 1])
    if rng.random() < cfg.anchored_frac:
        return 0
    return int(rng.integers(1, cfg.max_window_offset + 1))


def _window(tr: ps.Trajectory, start: int, n: int) -> ps.Trajectory:
    sl = slice(start, start + n)
    cut = lambda a: None if a is None else a[sl]
    return replace(tr, inputs=tr.inputs[sl], clean_states=tr.clean_states[sl], outputs=tr.outputs[sl],
                   states=cut(tr.states), process_noise=cut(tr.process_noise),
                   measurement_noise=cut(tr.measurement_noise))


def draw_batch(cfg: TrainConfig, stream: int, first_index: int, size: int,
               base_seed: Optional[int] = None, windowed: bool = True):
    """Simulate ``size`` trajectories and cut an ``n_ctx`` window from each.

    With ``windowed=False`` every window starts at the initial condition.
    Diverged runs are resampled with the next ``attempt`` of the same index.
    Returns ``(trajectories, n_resampled)``.
    """
    base = cfg.seed if base_seed is None else base_seed
    n = cfg.model.n_ctx
    N = n + (cfg.max_window_offset if windowed else 0)
    idx = list(range(first_index, first_index + size))
    attempts = [0] * size
    out = [None] * size
    pending = list(range(size))
    n_resampled = 0
    while pending:
        seeds = [ps.trajectory_seed(base, idx[j], stream, attempts[j]) for j in pending]
        trajs, ok = ps.simulate_batch(cfg.prior, cfg.noise, N, seeds)
        still = []
        for j, tr, good in zip(pending, trajs, ok):
            if good:
                out[j] = _window(tr, window_offset(cfg, tr.seed) if windowed else 0, n)
            else:
                attempts[j] += 1
                n_resampled += 1
                still.append(j)
        pending = still
    return out, n_resampled


def batch_arrays(trajs, std: Standardizer):
    u, y, xo = ps.stack_batch(trajs)
    return std.tokens(u, y), std.standardize_x(xo)


def fit_standardizer(cfg: TrainConfig) -> Standardizer:
    trajs, _ = draw_batch(cfg, ps.STREAM_CALIB, 0, cfg.n_calib)
    return Standardizer.fit(*ps.stack_batch(trajs))


def heldout_batch(cfg: TrainConfig, size: int = 32, windowed: bool = False):
    """Validation trajectories; by default anchored at the initial condition."""
    return draw_batch(cfg, ps.STREAM_HELDOUT, 0, size, windowed=windowed)[0]


def state_rmse(w: Weights, model: ModelConfig, tokens, targets) -> float:
    """Root-mean-square error per standardised state entry."""
    return math.sqrt(loss(w, model, tokens, targets) / (tokens.shape[1] * model.n_x))


# --- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: Weights
    standardizer: Standardizer
    log: List[TrainLogRecord]
    n_resampled: int
    seeds: List[tuple]   # (iteration, slot, seed) of every training trajectory


def _write_log(path: Path, records: List[TrainLogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_HEADER)
        for r in records:
            wr.writerow([r.iter, repr(r.loss), repr(r.rmse), repr(r.lr), f"{r.elapsed_s:.3f}"])


def read_log(path) -> List[TrainLogRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != LOG_HEADER:
            raise ValueError(f"unexpected training-log header {rd.fieldnames}")
        return [TrainLogRecord(int(r["iter"]), float(r["loss"]), float(r["rmse"]),
                               float(r["lr"]), float(r["elapsed_s"])) for r in rd]


def train(cfg: TrainConfig, out_dir=None, weights: Optional[Weights] = None,
          callback: Optional[Callable[[TrainLogRecord], None]] = None) -> TrainResult:
    """Run ``cfg.n_itr`` AdamW steps on fresh simulated batches.

    With ``out_dir`` set, writes ``checkpoint.ckpt`` every ``checkpoint_every``
    iterations and at the end, plus ``train_log.csv`` and ``train_seeds.csv``.
    The run is a deterministic function of ``cfg`` (timings aside).
    """
    model = cfg.model
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.ckpt" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    std = fit_standardizer(cfg)
    w = init_weights(model, seed=cfg.seed) if weights is None else dict(weights)
    state = AdamState.zeros(w)
    records: List[TrainLogRecord] = []
    seeds: List[tuple] = []
    n_resampled = 0
    t0 = time.perf_counter()

    def save(weights_, iteration):
        if ckpt is not None:
            save_checkpoint(ckpt, weights_, model, std,
                            meta={"iteration": iteration, "seed": cfg.seed})

    for it in range(cfg.n_itr):
        trajs, nr = draw_batch(cfg, ps.STREAM_TRAIN, it * cfg.batch_size, cfg.batch_size)
        n_resampled += nr
        seeds.extend((it, j, tr.seed) for j, tr in enumerate(trajs))
        tokens, targets = batch_arrays(trajs, std)
        value, grads = loss_and_grad(w, model, tokens, targets)
        if not math.isfinite(value):
            save(w, it)
            if out is not None:
                _write_log(out / "train_log.csv", records)
            raise TrainingDiverged(it, ckpt)
        lr = learning_rate(cfg, it)
        w = optimizer_step(w, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps,
                           cfg.weight_decay, cfg.grad_clip)
        rec = TrainLogRecord(it, value, math.sqrt(value / (model.n_ctx * model.n_x)), lr,
                             time.perf_counter() - t0)
        records.append(rec)
        if callback is not None:
            callback(rec)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < cfg.n_itr:
            save(w, it + 1)

    if n_resampled:
        log.warning("resampled %d diverged trajectories", n_resampled)
    save(w, cfg.n_itr)
    if out is not None:
        _write_log(out / "train_log.csv", records)
        with open(out / "train_seeds.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("iter", "slot", "seed"))
            wr.writerows(seeds)
    return TrainResult(w, std, records, n_resampled, seeds)
