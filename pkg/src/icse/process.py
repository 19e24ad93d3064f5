"""Evaporation-process simulator and meta-dataset generation.

The plant is a two-state evaporator (product composition ``x1`` in %,
operating pressure ``x2`` in kPa) driven by steam pressure ``u1`` and
cooling-water flow ``u2``; only ``x2`` is measured.

Everything here is vectorised over leading axes: states are ``(..., 2)``,
inputs ``(..., 2)`` and parameter arrays ``(..., 19)`` broadcast together,
so a whole training batch integrates in one call.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

PARAM_NAMES = (
    "a", "b", "c", "d", "e", "varphi", "gamma", "h", "M", "C", "UA2", "Cp",
    "lambda_", "lambda_s", "F1", "X1", "F3", "T1", "T200",
)
N_PARAMS = len(PARAM_NAMES)
IDX = {name: i for i, name in enumerate(PARAM_NAMES)}


class SimulationDivergence(FloatingPointError):
    """Raised when a simulated quantity stops being finite."""

    def __init__(self, quantity: str, message: str = ""):
        self.quantity = quantity
        super().__init__(message or f"non-finite value in {quantity}")


@dataclass(frozen=True)
class ProcessParams:
    a: float = 0.5616
    b: float = 0.3126
    c: float = 48.43
    d: float = 0.507
    e: float = 55.0
    varphi: float = 0.1538
    # 90 (not 55) is the value for which (25, 49.743) / (191.713, 215.888)
    # is an equilibrium of the model below.
    gamma: float = 90.0
    h: float = 0.16
    M: float = 20.0
    C: float = 4.0
    UA2: float = 6.84
    Cp: float = 0.07
    lambda_: float = 38.5
    lambda_s: float = 36.6
    F1: float = 10.0
    X1: float = 5.0
    F3: float = 50.0
    T1: float = 40.0
    T200: float = 25.0

    def __post_init__(self):
        for name in ("M", "C", "lambda_", "lambda_s", "Cp", "UA2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ProcessParams.{name} must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "ProcessParams":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))


NOMINAL = ProcessParams()
X_SS = np.array([25.0, 49.743])
U_SS = np.array([191.713, 215.888])


@dataclass(frozen=True)
class NoiseSpec:
    """Variances of the additive process noise (diagonal) and of the measurement noise."""

    process_var: tuple = (0.5, 0.5)
    output_var: float = 2.0

    def __post_init__(self):
        if len(self.process_var) != 2:
            raise ValueError("process_var must have two entries")
        if min(self.process_var) < 0 or self.output_var < 0:
            raise ValueError("noise variances must be non-negative")

    @property
    def process_cov(self) -> np.ndarray:
        return np.diag(np.asarray(self.process_var, dtype=np.float64))

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(process_var=(0.0, 0.0), output_var=0.0)


@dataclass(frozen=True)
class ClassPrior:
    nominal: ProcessParams = field(default_factory=ProcessParams)
    perturb_frac: float = 0.2
    x_s: tuple = (25.0, 49.743)
    u_s: tuple = (191.713, 215.888)
    prbs_amplitude: float = 20.0
    init_perturb_frac: float = 0.2

    def __post_init__(self):
        if not 0 <= self.perturb_frac < 1:
            raise ValueError("perturb_frac must lie in [0, 1)")
        if not 0 <= self.init_perturb_frac < 1:
            raise ValueError("init_perturb_frac must lie in [0, 1)")


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise SimulationDivergence(name)


def _columns(p):
    if isinstance(p, ProcessParams):
        return astuple(p)
    if isinstance(p, tuple):
        return p
    p = np.asarray(p, dtype=np.float64)
    return tuple(p[..., i] for i in range(N_PARAMS))


def continuous_dynamics(x, u, p, check: bool = True) -> np.ndarray:
    """Time derivative of the evaporator state.

    ``p`` is a :class:`ProcessParams` or an array whose last axis holds the
    19 coefficients in ``PARAM_NAMES`` order.  With ``check=False`` no
    divergence checks are made (used by the batched integrator, which flags
    bad rows itself).
    """
    (a, b, c, d, e, varphi, gamma, h, M, C, UA2, Cp, lam, lam_s,
     F1, X1, F3, T1, T200) = _columns(p)
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    u1, u2 = u[..., 0], u[..., 1]

    T2 = a * x2 + b * x1 + c
    T3 = d * x2 + e
    T100 = varphi * u1 + gamma
    UA1 = h * (F1 + F3)
    Q100 = UA1 * (T100 - T2)
    F4 = (Q100 - F1 * Cp * (T2 - T1)) / lam
    with np.errstate(divide="ignore", invalid="ignore"):
        Q200 = UA2 * (T3 - T200) / (1.0 + UA2 / (2.0 * Cp * u2))
    F5 = Q200 / lam
    F2 = F1 - F4

    if check:
        F100 = Q100 / lam_s  # steam consumption; not fed back into the states
        for name, val in (("T2", T2), ("T3", T3), ("T100", T100), ("Q100", Q100),
                          ("F100", F100), ("F4", F4), ("Q200", Q200),
                          ("F5", F5), ("F2", F2)):
            _check_finite(name, val)

    out = np.empty(np.broadcast(x1, F1).shape + (2,))
    out[..., 0] = (F1 * X1 - F2 * x1) / M
    out[..., 1] = (F4 - F5) / C
    if check:
        _check_finite("dx/dt", out)
    return out


Dynamics = Callable[..., np.ndarray]


def integrate_step(x, u, p, Ts: float = 1.0, n_sub: int = 10,
                   dynamics: Optional[Dynamics] = None, check: bool = True) -> np.ndarray:
    """Advance the state by ``Ts`` seconds with classical RK4 under zero-order hold."""
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    f = continuous_dynamics if dynamics is None else dynamics
    if dynamics is None:
        p = _columns(p)
    elif isinstance(p, ProcessParams):
        p = p.as_array()
    x = np.asarray(x, dtype=np.float64)
    h = Ts / n_sub
    for _ in range(n_sub):
        k1 = f(x, u, p, check=False)
        k2 = f(x + 0.5 * h * k1, u, p, check=False)
        k3 = f(x + 0.5 * h * k2, u, p, check=False)
        k4 = f(x + h * k3, u, p, check=False)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check:
        _check_finite("state", x)
    return x


# --- random streams -------------------------------------------------------

# Distinct sub-streams keep training, calibration, validation and test
# trajectories disjoint under one base seed.
STREAM_TRAIN = 0
STREAM_CALIB = 1
STREAM_HELDOUT = 2
STREAM_TEST = 3
STREAM_GENERATE = 4


def trajectory_seed(base_seed: int, index: int, stream: int = STREAM_GENERATE,
                    attempt: int = 0) -> int:
    """Deterministic 64-bit seed for trajectory ``index`` of ``stream``."""
    ss = np.random.SeedSequence([int(base_seed), int(stream), int(index), int(attempt)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _child_rngs(seed: int, n: int):
    return [np.random.Generator(np.random.Philox(s))
            for s in np.random.SeedSequence(int(seed)).spawn(n)]


def sample_instance(prior: ClassPrior, rng_seed) -> ProcessParams:
    """Draw one plant instance: every coefficient scaled by ``1 + frac * U[-1, 1]``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    scale = 1.0 + prior.perturb_frac * rng.uniform(-1.0, 1.0, N_PARAMS)
    return ProcessParams.from_array(prior.nominal.as_array() * scale)


def generate_prbs(length: int, amplitude: float, rng_seed) -> np.ndarray:
    """i.i.d. +/-amplitude binary sequence, one fair coin per sample."""
    if length <= 0:
        raise ValueError("length must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    signs = np.where(rng.integers(0, 2, size=length) == 1, 1.0, -1.0)
    return amplitude * signs


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated experiment.

    ``outputs`` measure the propagated (noisy) state; ``clean_states`` is the
    noise-free twin under the same inputs and initial condition, which is the
    regression target.  The noise realisations and the noisy state are kept
    for diagnostics but are not part of the on-disk format.
    """

    inputs: np.ndarray
    clean_states: np.ndarray
    outputs: np.ndarray
    params: ProcessParams
    seed: int
    dt_sample: float = 1.0
    states: Optional[np.ndarray] = None
    process_noise: Optional[np.ndarray] = None
    measurement_noise: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.clean_states) != n or len(self.outputs) != n:
            raise ValueError("inputs, clean_states and outputs must have equal length")

    def __len__(self):
        return len(self.inputs)


@dataclass
class _Draws:
    params: np.ndarray     # (B, 19)
    x0: np.ndarray         # (B, 2)
    inputs: np.ndarray     # (B, N, 2)
    w: np.ndarray          # (B, N, 2)
    v: np.ndarray          # (B, N)


def _draw(prior: ClassPrior, noise: NoiseSpec, N: int, seed: int):
    r_par, r_init, r_u1, r_u2, r_w, r_v = _child_rngs(seed, 6)
    params = sample_instance(prior, r_par).as_array()
    x_s = np.asarray(prior.x_s, dtype=np.float64)
    x0 = x_s * (1.0 + prior.init_perturb_frac * r_init.uniform(-1.0, 1.0, 2))
    u = np.empty((N, 2))
    u[:, 0] = prior.u_s[0] + generate_prbs(N, prior.prbs_amplitude, r_u1)
    u[:, 1] = prior.u_s[1] + generate_prbs(N, prior.prbs_amplitude, r_u2)
    w = r_w.standard_normal((N, 2)) * np.sqrt(np.asarray(noise.process_var, dtype=np.float64))
    v = r_v.standard_normal(N) * np.sqrt(noise.output_var)
    return params, x0, u, w, v


@numba.njit(cache=True)
def _rhs(x1, x2, u1, u2, p):
    T2 = p[0] * x2 + p[1] * x1 + p[2]
    T3 = p[3] * x2 + p[4]
    T100 = p[5] * u1 + p[6]
    UA1 = p[7] * (p[14] + p[16])
    Q100 = UA1 * (T100 - T2)
    F4 = (Q100 - p[14] * p[11] * (T2 - p[17])) / p[12]
    Q200 = p[10] * (T3 - p[18]) / (1.0 + p[10] / (2.0 * p[11] * u2))
    F5 = Q200 / p[12]
    F2 = p[14] - F4
    return (p[14] * p[15] - F2 * x1) / p[8], (F4 - F5) / p[9]


@numba.njit(cache=True)
def _rk4_scalar(x1, x2, u1, u2, p, Ts, n_sub):
    h = Ts / n_sub
    for _ in range(n_sub):
        a1, a2 = _rhs(x1, x2, u1, u2, p)
        b1, b2 = _rhs(x1 + 0.5 * h * a1, x2 + 0.5 * h * a2, u1, u2, p)
        c1, c2 = _rhs(x1 + 0.5 * h * b1, x2 + 0.5 * h * b2, u1, u2, p)
        d1, d2 = _rhs(x1 + h * c1, x2 + h * c2, u1, u2, p)
        x1 = x1 + (h / 6.0) * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
        x2 = x2 + (h / 6.0) * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
    return x1, x2


@numba.njit(cache=True)
def _propagate_kernel(params, x0, u, w, Ts, n_sub, x, xo):
    B, N = u.shape[0], u.shape[1]
    for i in range(B):
        p = params[i]
        x[i, 0, 0] = xo[i, 0, 0] = x0[i, 0]
        x[i, 0, 1] = xo[i, 0, 1] = x0[i, 1]
        for k in range(N - 1):
            u1, u2 = u[i, k, 0], u[i, k, 1]
            n1, n2 = _rk4_scalar(x[i, k, 0], x[i, k, 1], u1, u2, p, Ts, n_sub)
            x[i, k + 1, 0] = n1 + w[i, k, 0]
            x[i, k + 1, 1] = n2 + w[i, k, 1]
            c1, c2 = _rk4_scalar(xo[i, k, 0], xo[i, k, 1], u1, u2, p, Ts, n_sub)
            xo[i, k + 1, 0] = c1
            xo[i, k + 1, 1] = c2


def _propagate(params, x0, u, w, v, Ts, n_sub):
    """Batched noisy + noise-free propagation; returns (x, xo, y, ok).

    Compiled scalar transcription of ``integrate_step``; the test-suite pins
    the two together.
    """
    B, N, _ = u.shape
    x = np.empty((B, N, 2))
    xo = np.empty((B, N, 2))
    _propagate_kernel(np.ascontiguousarray(params), np.ascontiguousarray(x0),
                      np.ascontiguousarray(u), np.ascontiguousarray(w),
                      float(Ts), int(n_sub), x, xo)
    y = x[:, :, 1] + v
    ok = np.all(np.isfinite(x), axis=(1, 2)) & np.all(np.isfinite(xo), axis=(1, 2))
    return x, xo, y, ok


def simulate_batch(prior: ClassPrior, noise: NoiseSpec, N: int, seeds,
                   Ts: float = 1.0, n_sub: int = 10):
    """Simulate one trajectory per seed in a single vectorised pass.

    Returns ``(trajectories, ok)`` where ``ok[i]`` is False for a diverged
    run (its entry in ``trajectories`` is then ``None``).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    seeds = [int(s) for s in seeds]
    if not seeds:
        return [], np.zeros(0, dtype=bool)
    draws = [_draw(prior, noise, N, s) for s in seeds]
    params, x0, u, w, v = (np.stack(z) for z in zip(*draws))
    x, xo, y, ok = _propagate(params, x0, u, w, v, Ts, n_sub)
    out = []
    for i, s in enumerate(seeds):
        if not ok[i]:
            out.append(None)
            continue
        out.append(Trajectory(
            inputs=u[i], clean_states=xo[i], outputs=y[i],
            params=ProcessParams.from_array(params[i]), seed=s, dt_sample=Ts,
            states=x[i], process_noise=w[i], measurement_noise=v[i],
        ))
    return out, ok


def simulate_trajectory(prior: ClassPrior, noise: NoiseSpec, N: int, rng_seed: int,
                        Ts: float = 1.0, n_sub: int = 10) -> Trajectory:
    """Simulate one perturbed instance for ``N`` samples.

    Sample k holds the state at time k*Ts, the input applied over
    [k*Ts, (k+1)*Ts) and the measurement of the noisy pressure at time k*Ts.
    """
    trajs, ok = simulate_batch(prior, noise, N, [rng_seed], Ts, n_sub)
    if not ok[0]:
        raise SimulationDivergence("state", f"trajectory with seed {rng_seed} diverged")
    return trajs[0]


def steady_state_trajectory(N: int, params: ProcessParams = NOMINAL, seed: int = 0) -> Trajectory:
    """Noise-free, unperturbed run from (x_s, u_s); handy for regression tests."""
    prior = ClassPrior(nominal=params, perturb_frac=0.0, prbs_amplitude=0.0, init_perturb_frac=0.0)
    return simulate_trajectory(prior, NoiseSpec.zero(), N, seed)


def stack_batch(trajs):
    """Stack trajectories into arrays ``(u, y, xo)`` of shapes (B,N,2), (B,N), (B,N,2)."""
    u = np.stack([t.inputs for t in trajs])
    y = np.stack([t.outputs for t in trajs])
    xo = np.stack([t.clean_states for t in trajs])
    return u, y, xo


__all__ = [
    "PARAM_NAMES", "N_PARAMS", "NOMINAL", "X_SS", "U_SS", "ProcessParams", "NoiseSpec",
    "ClassPrior", "Trajectory", "SimulationDivergence", "continuous_dynamics",
    "integrate_step", "integrate_rows", "sample_instance", "generate_prbs", "simulate_trajectory",
    "simulate_batch", "trajectory_seed", "steady_state_trajectory", "stack_batch",
    "STREAM_TRAIN", "STREAM_CALIB", "STREAM_HELDOUT", "STREAM_TEST", "STREAM_GENERATE",
]


@numba.njit(cache=True)
def _integrate_rows_kernel(x, u, params, Ts, n_sub, out):
    for i in range(x.shape[0]):
        out[i, 0], out[i, 1] = _rk4_scalar(x[i, 0], x[i, 1], u[i, 0], u[i, 1], params[i], Ts, n_sub)


def integrate_rows(x, u, params, Ts: float = 1.0, n_sub: int = 10) -> np.ndarray:
    """Compiled :func:`integrate_step` for ``x`` (m, 2) with broadcastable ``u`` and ``params``.

    No divergence checks; callers inspect the result.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = x.shape[0]
    u = np.ascontiguousarray(np.broadcast_to(np.asarray(u, dtype=np.float64), (m, 2)))
    if isinstance(params, ProcessParams):
        params = params.as_array()
    params = np.ascontiguousarray(np.broadcast_to(np.asarray(params, dtype=np.float64), (m, N_PARAMS)))
    out = np.empty((m, 2))
    _integrate_rows_kernel(np.ascontiguousarray(x), u, params, float(Ts), int(n_sub), out)
    return out
