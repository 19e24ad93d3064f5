"""Extended Kalman filter baselines for the evaporation process.

Two configurations:

* ``oracle`` - the filter knows every coefficient of the instance it tracks.
* ``enlarged`` - ``UA2`` is unknown; it is appended to the state as a
  constant (``x3' = 0``) and estimated along with ``x1, x2``.  The other
  coefficients are the instance's true values by default
  (``known_params="true"``) or the nominal ones (``known_params="nominal"``).

The transition is the same discretised model used by the simulator and its
Jacobian is taken by central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np

from . import process as ps

_UA2 = ps.IDX["UA2"]


class FilterError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    mode: str = "oracle"
    Q: Tuple[float, ...] = (0.5, 0.5)
    R: float = 2.0
    P0: Tuple[float, ...] = (0.1, 0.1)
    x0_guess: Tuple[float, ...] = (25.0, 49.743)
    jacobian_step: float = 1e-6
    known_params: str = "true"

    def __post_init__(self):
        if self.mode not in ("oracle", "enlarged"):
            raise ValueError("mode must be 'oracle' or 'enlarged'")
        if self.known_params not in ("true", "nominal"):
            raise ValueError("known_params must be 'true' or 'nominal'")
        n = 2 if self.mode == "oracle" else 3
        for name in ("Q", "P0", "x0_guess"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have {n} entries in {self.mode} mode")
        if min(self.Q) < 0 or min(self.P0) < 0 or self.R < 0:
            raise ValueError("Q, R and P0 entries must be non-negative")
        if not self.jacobian_step > 0:
            raise ValueError("jacobian_step must be positive")

    @property
    def n(self) -> int:
        return len(self.x0_guess)

    @classmethod
    def oracle(cls, **kw) -> "EkfConfig":
        return cls(mode="oracle", **kw)

    @classmethod
    def enlarged(cls, nominal: ps.ProcessParams = ps.NOMINAL, **kw) -> "EkfConfig":
        kw.setdefault("Q", (0.5, 0.5, 0.0))
        kw.setdefault("P0", (0.1, 0.1, 1.0))
        kw.setdefault("x0_guess", (25.0, 49.743, nominal.UA2))
        return cls(mode="enlarged", **kw)


@dataclass
class FilterBelief:
    x: np.ndarray
    P: np.ndarray

    def copy(self) -> "FilterBelief":
        return FilterBelief(self.x.copy(), self.P.copy())


@dataclass
class FilterModel:
    """Transition ``fx(X, u)`` acting on rows of ``X`` (m, n), plus the linear output map."""

    fx: Callable[[np.ndarray, np.ndarray], np.ndarray]
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    jacobian_step: float = 1e-6
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


def discrete_transition(x, u, params: ps.ProcessParams, mode: str = "oracle",
                        Ts: float = 1.0) -> np.ndarray:
    """One-sample prediction of the filter model for rows of ``x``.

    In ``enlarged`` mode column 2 holds ``UA2`` and is passed through
    unchanged; every other coefficient comes from ``params``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = params.as_array()
    if mode == "oracle":
        out = ps.integrate_rows(X, u, p, Ts)
    elif mode == "enlarged":
        P = np.tile(p, (X.shape[0], 1))
        P[:, _UA2] = X[:, 2]
        out = np.concatenate([ps.integrate_rows(X[:, :2], u, P, Ts), X[:, 2:3]], axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(out)):
        raise ps.SimulationDivergence("state", "EKF prediction diverged")
    return out if np.ndim(x) == 2 else out[0]


def numeric_jacobian(f, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a row-wise map ``f`` at ``x``.

    ``f`` receives a (2n, n) stack of perturbed points and returns (2n, m).
    The step for component i is ``step * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    hs = step * np.maximum(1.0, np.abs(x))
    E = np.diag(hs)
    pts = np.concatenate([x + E, x - E])
    vals = np.asarray(f(pts))
    J = ((vals[:n] - vals[n:]) / (2.0 * hs)[:, None]).T
    if not np.all(np.isfinite(J)):
        raise FilterError("non-finite Jacobian entry")
    return J


def ekf_predict(belief: FilterBelief, u, model: FilterModel) -> FilterBelief:
    if model.jacobian is not None:
        F = model.jacobian(belief.x, u)
    else:
        F = numeric_jacobian(lambda X: model.fx(X, u), belief.x, model.jacobian_step)
    x = model.fx(belief.x[None], u)[0]
    P = F @ belief.P @ F.T + model.Q
    return FilterBelief(x, 0.5 * (P + P.T))


def ekf_update(belief: FilterBelief, y, model: FilterModel):
    """Measurement update in Joseph form; returns ``(belief, innovation)``."""
    H, R = model.H, model.R
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    innov = y - H @ belief.x
    S = H @ belief.P @ H.T + R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e15:
        raise FilterError("innovation covariance is singular")
    K = np.linalg.solve(S, H @ belief.P).T
    x = belief.x + K @ innov
    IKH = np.eye(len(x)) - K @ H
    P = IKH @ belief.P @ IKH.T + K @ R @ K.T
    return FilterBelief(x, 0.5 * (P + P.T)), innov


def ekf_step(belief: FilterBelief, u, y, model: FilterModel):
    """Predict with ``u`` then correct with ``y``: x_{k-1|k-1} -> x_{k|k}."""
    return ekf_update(ekf_predict(belief, u, model), y, model)


def make_model(cfg: EkfConfig, params: ps.ProcessParams) -> FilterModel:
    """Filter model built on the coefficients in ``params`` (see :func:`filter_params`)."""
    n = cfg.n
    H = np.zeros((1, n))
    H[0, 1] = 1.0

    def fx(X, u):
        return discrete_transition(X, u, params, cfg.mode)

    return FilterModel(fx, H, np.diag(cfg.Q), np.array([[cfg.R]]), cfg.jacobian_step)


def filter_params(cfg: EkfConfig, true_params: ps.ProcessParams,
                  nominal: ps.ProcessParams = ps.NOMINAL) -> ps.ProcessParams:
    """Coefficients the filter is allowed to know about an instance."""
    if cfg.mode == "oracle":
        return true_params
    if cfg.known_params == "nominal":
        return nominal
    return replace(true_params, UA2=nominal.UA2)


def initial_belief(cfg: EkfConfig) -> FilterBelief:
    return FilterBelief(np.array(cfg.x0_guess, dtype=np.float64), np.diag(np.array(cfg.P0, dtype=np.float64)))


@dataclass
class FilterRun:
    estimates: np.ndarray          # (N, n) x_hat_{k|k}
    covariances: np.ndarray        # (N, n, n)
    innovations: np.ndarray        # (N,)
    latency_s: np.ndarray          # (N,) wall clock per estimate


def run_filter(u, y, cfg: EkfConfig, params: ps.ProcessParams = ps.NOMINAL,
               model: Optional[FilterModel] = None) -> FilterRun:
    """Filter a whole record.

    ``params`` are the coefficients the filter may use, normally
    ``filter_params(cfg, instance.params)``; in enlarged mode their ``UA2``
    is ignored.  Step 0 is a pure measurement update of the prior guess.
    """
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(u) != len(y):
        raise ValueError("inputs and outputs must have equal length")
    model = make_model(cfg, params) if model is None else model
    N, n = len(y), cfg.n
    est = np.empty((N, n))
    cov = np.empty((N, n, n))
    innov = np.empty(N)
    lat = np.empty(N)
    belief = initial_belief(cfg)
    clock = time.perf_counter
    for k in range(N):
        t0 = clock()
        if k == 0:
            belief, e = ekf_update(belief, y[0], model)
        else:
            belief, e = ekf_step(belief, u[k - 1], y[k], model)
        lat[k] = clock() - t0
        est[k] = belief.x
        cov[k] = belief.P
        innov[k] = e[0]
    return FilterRun(est, cov, innov, lat)
