"""Fast oracle checks runnable from the command line (``icse selftest``)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import process as ps
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from .ekf import FilterBelief, FilterModel, ekf_step, ekf_update
from .transformer import ModelConfig, Standardizer, forward, init_weights, loss, loss_and_grad


GRAD_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""


def _random_weights(cfg: ModelConfig, rng, scale=0.3):
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in init_weights(cfg, 0).items()}


def check_steady_state() -> CheckResult:
    r = float(np.max(np.abs(ps.continuous_dynamics(ps.X_SS, ps.U_SS, ps.NOMINAL))))
    return CheckResult("steady-state residual |dx/dt|_inf", r, 1e-2, r <= 1e-2)


def check_causality(trials: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=2, n_heads=2, n_ctx=12, d_filter=8)
    worst = 0.0
    for _ in range(trials):
        w = _random_weights(cfg, rng)
        T = int(rng.integers(2, cfg.n_ctx + 1))
        tok = rng.normal(size=(T, cfg.n_in))
        j = int(rng.integers(1, T))
        base = forward(w, cfg, tok)
        tok2 = tok.copy()
        tok2[j:] += rng.normal(0, 5.0, tok2[j:].shape)
        worst = max(worst, float(np.max(np.abs(forward(w, cfg, tok2)[:j] - base[:j]))))
    return CheckResult("causality: max past-output change", worst, 0.0, worst == 0.0)


def check_gradient(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=2, n_heads=2, n_ctx=6, d_filter=8)
    w = _random_weights(cfg, rng)
    x = rng.normal(size=(2, cfg.n_ctx, cfg.n_in))
    t = rng.normal(size=(2, cfg.n_ctx, cfg.n_x))
    _, g = loss_and_grad(w, cfg, x, t)
    h, worst = 1e-5, 0.0
    for k, arr in w.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(w, cfg, x, t)
            arr[idx] = old - h
            lm = loss(w, cfg, x, t)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            an = g[k][idx]
            # key-bias gradients are exactly zero; the floor keeps FD round-off from counting
            denom = max(abs(fd), abs(an), GRAD_FLOOR)
            worst = max(worst, abs(fd - an) / denom)
    return CheckResult("gradient vs central differences (rel.)", worst, 1e-4, worst <= 1e-4)


def _linear_kf(a, q, r, x0, p0, u_gain, u, y):
    """Plain scalar Kalman filter, standard covariance update."""
    x, p, out = x0, p0, []
    for k in range(len(y)):
        if k > 0:
            x = a * x + u_gain * u[k - 1]
            p = a * p * a + q
        kg = p / (p + r)
        x = x + kg * (y[k] - x)
        p = (1 - kg) * p
        out.append(x)
    return np.array(out)


def check_linear_kf(seed: int = 0, steps: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    a, q, r, bgain = 0.9, 0.3, 0.5, 0.2
    u = rng.normal(size=steps)
    x, y = 0.0, []
    for k in range(steps):
        y.append(x + rng.normal(0, np.sqrt(r)))
        x = a * x + bgain * u[k] + rng.normal(0, np.sqrt(q))
    y = np.array(y)
    model = FilterModel(fx=lambda X, uk: a * X + bgain * uk, H=np.array([[1.0]]),
                        Q=np.array([[q]]), R=np.array([[r]]),
                        jacobian=lambda x_, uk: np.array([[a]]))
    b = FilterBelief(np.array([0.0]), np.array([[1.0]]))
    est = []
    for k in range(steps):
        b, _ = ekf_update(b, y[0], model) if k == 0 else ekf_step(b, u[k - 1], y[k], model)
        est.append(b.x[0])
    ref = _linear_kf(a, q, r, 0.0, 1.0, bgain, u, y)
    err = float(np.max(np.abs(np.array(est) - ref)))
    return CheckResult("EKF vs linear Kalman filter (abs.)", err, 1e-10, err <= 1e-10)


def check_checkpoint_roundtrip(path: Optional[str] = None) -> CheckResult:
    if path is None:
        cfg = ModelConfig(n_layers=1, n_heads=2, n_ctx=5, d_filter=4)
        w = _random_weights(cfg, np.random.default_rng(1))
        std = Standardizer.identity(cfg)
        blob = encode_checkpoint(w, cfg, std)
        name = "checkpoint round trip (in-memory)"
    else:
        w, cfg, std, _ = load_checkpoint(path)
        blob = encode_checkpoint(w, cfg, std)
        name = f"checkpoint round trip ({path})"
    w2, cfg2, std2, _ = decode_checkpoint(blob)
    tok = np.random.default_rng(2).normal(size=(min(cfg.n_ctx, 7), cfg.n_in))
    diff = float(np.max(np.abs(forward(w, cfg, tok) - forward(w2, cfg2, tok))))
    same = encode_checkpoint(w2, cfg2, std2) == blob
    return CheckResult(name, diff, 0.0, diff == 0.0 and same)


CHECKS: List[Callable[[], CheckResult]] = [
    check_steady_state, check_causality, check_gradient, check_linear_kf,
]


def run_all(checkpoint: Optional[str] = None) -> List[CheckResult]:
    results = [c() for c in CHECKS]
    results.append(check_checkpoint_roundtrip(checkpoint))
    return results
