"""Decoder-only transformer mapping (u, y) histories to state estimates.

GPT-2 layout with real-valued tokens: a linear input embedding plus learned
absolute positions, ``n_layers`` pre-norm blocks (causal multi-head
attention, GELU MLP), a final layer norm and a linear head onto the state
space.  Position k of the output is the estimate of x_k given tokens 0..k.

Weights are a plain ``dict[str, np.ndarray]``; gradients use the same keys.
Forward and backward are written out by hand in NumPy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

Weights = Dict[str, np.ndarray]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: int):
        self.layer = layer
        where = "input embedding" if layer < 0 else f"layer {layer}"
        super().__init__(f"non-finite activation after {where}")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    n_heads: int = 4
    n_ctx: int = 500
    d_filter: int = 128
    n_u: int = 2
    n_y: int = 1
    n_x: int = 2
    dropout: float = 0.0
    precision: str = "float64"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        for name in ("n_heads", "n_ctx", "d_filter", "n_u", "n_x"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_y < 0:
            raise ValueError("n_y must be >= 0")
        if self.d_filter % self.n_heads:
            raise ValueError("d_filter must be divisible by n_heads")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported (fresh data every iteration)")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be 'float64' or 'float32'")

    @property
    def n_in(self) -> int:
        return self.n_u + self.n_y

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered map of tensor name to shape."""
    d, shapes = cfg.d_filter, {}
    shapes["wte.w"] = (cfg.n_in, d)
    shapes["wte.b"] = (d,)
    shapes["wpe"] = (cfg.n_ctx, d)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.w"] = (d, 3 * d)
        shapes[p + "attn.b"] = (3 * d,)
        shapes[p + "proj.w"] = (d, d)
        shapes[p + "proj.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "fc.w"] = (d, 4 * d)
        shapes[p + "fc.b"] = (4 * d,)
        shapes[p + "out.w"] = (4 * d, d)
        shapes[p + "out.b"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, cfg.n_x)
    shapes["head.b"] = (cfg.n_x,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    d, L = cfg.d_filter, cfg.n_layers
    per_layer = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) + (d * 4 * d + 4 * d) + (4 * d * d + d)
    return (cfg.n_in * d + d) + cfg.n_ctx * d + L * per_layer + 2 * d + (d * cfg.n_x + cfg.n_x)


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Weights:
    """GPT-2 style init; the head starts at zero so the untrained filter outputs the mean state."""
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.startswith("head."):
            w[name] = np.zeros(shape)
        elif name.endswith(".g"):
            w[name] = np.ones(shape)
        elif name.endswith(".b"):
            w[name] = np.zeros(shape)
        else:
            w[name] = rng.normal(0.0, std, shape)
    return {k: v.astype(cfg.dtype) for k, v in w.items()}


def zeros_like(w: Weights) -> Weights:
    return {k: np.zeros_like(v) for k, v in w.items()}


def check_weights(w: Weights, cfg: ModelConfig) -> None:
    shapes = parameter_shapes(cfg)
    if set(shapes) != set(w):
        missing = sorted(set(shapes) - set(w))
        extra = sorted(set(w) - set(shapes))
        raise ShapeError(f"weight names do not match config (missing={missing}, extra={extra})")
    for name, shape in shapes.items():
        if w[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {w[name].shape}")


# --- primitives -------------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu_tanh(x):
    x2 = x * x
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))


def gelu(x):
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x, t):
    # t = _gelu_tanh(x), kept from the forward pass
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _causal_mask(T):
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def _softmax_masked(s, mask):
    s = np.where(mask, -np.inf, s)
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def _dense(x, w, b):
    return x @ w + b


def _dense_back(dy, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(0)


# --- forward / backward -----------------------------------------------------

def _as_batch(tokens, cfg):
    x = np.asarray(tokens, dtype=cfg.dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.n_in:
        raise ShapeError(f"tokens must be (T, {cfg.n_in}) or (B, T, {cfg.n_in}); got {np.shape(tokens)}")
    T = x.shape[1]
    if not 1 <= T <= cfg.n_ctx:
        raise ShapeError(f"sequence length {T} outside [1, n_ctx={cfg.n_ctx}]")
    return x, squeeze


def _forward(w: Weights, cfg: ModelConfig, x: np.ndarray, keep_cache: bool,
             return_attention: bool = False):
    B, T, _ = x.shape
    H, d = cfg.n_heads, cfg.d_filter
    hd = d // H
    scale = 1.0 / math.sqrt(hd)
    mask = _causal_mask(T)
    caches, attn_probs = [], []

    h = _dense(x, w["wte.w"], w["wte.b"]) + w["wpe"][:T]
    if not np.all(np.isfinite(h)):
        raise NonFiniteActivation(-1)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a_in, ln1 = _layernorm(h, w[p + "ln1.g"], w[p + "ln1.b"])
        qkv = _dense(a_in, w[p + "attn.w"], w[p + "attn.b"])
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(B, T, H, hd).transpose(0, 2, 1, 3)
                   for j in range(3))
        att = _softmax_masked((q @ k.transpose(0, 1, 3, 2)) * scale, mask)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        h = h + _dense(o, w[p + "proj.w"], w[p + "proj.b"])
        m_in, ln2 = _layernorm(h, w[p + "ln2.g"], w[p + "ln2.b"])
        f = _dense(m_in, w[p + "fc.w"], w[p + "fc.b"])
        t = _gelu_tanh(f)
        g = 0.5 * f * (1.0 + t)
        h = h + _dense(g, w[p + "out.w"], w[p + "out.b"])
        if not np.all(np.isfinite(h)):
            raise NonFiniteActivation(i)
        if keep_cache:
            caches.append((a_in, ln1, q, k, v, att, o, m_in, ln2, f, t, g))
        if return_attention:
            attn_probs.append(att)
    hf, lnf = _layernorm(h, w["lnf.g"], w["lnf.b"])
    out = _dense(hf, w["head.w"], w["head.b"])
    cache = (x, caches, hf, lnf) if keep_cache else None
    return out, cache, attn_probs


def forward(w: Weights, cfg: ModelConfig, tokens) -> np.ndarray:
    """Standardised state estimates, one row per token: (T, n_x) or (B, T, n_x)."""
    x, squeeze = _as_batch(tokens, cfg)
    out, _, _ = _forward(w, cfg, x, keep_cache=False)
    return out[0] if squeeze else out


def attention_probabilities(w: Weights, cfg: ModelConfig, tokens):
    """Per-layer attention matrices (B, H, T, T); diagnostic only."""
    x, _ = _as_batch(tokens, cfg)
    return _forward(w, cfg, x, keep_cache=False, return_attention=True)[2]


def _backward(w: Weights, cfg: ModelConfig, cache, dout) -> Weights:
    x, caches, hf, lnf = cache
    B, T, _ = x.shape
    H, d = cfg.n_heads, cfg.d_filter
    hd = d // H
    scale = 1.0 / math.sqrt(hd)
    grads = {}

    dhf, grads["head.w"], grads["head.b"] = _dense_back(dout, hf, w["head.w"])
    dh, grads["lnf.g"], grads["lnf.b"] = _layernorm_back(dhf, w["lnf.g"], lnf)

    for i in reversed(range(cfg.n_layers)):
        p = f"h{i}."
        a_in, ln1, q, k, v, att, o, m_in, ln2, f, t, g = caches[i]
        # MLP branch
        dg, grads[p + "out.w"], grads[p + "out.b"] = _dense_back(dh, g, w[p + "out.w"])
        df = dg * _gelu_grad(f, t)
        dm_in, grads[p + "fc.w"], grads[p + "fc.b"] = _dense_back(df, m_in, w[p + "fc.w"])
        dx_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_back(dm_in, w[p + "ln2.g"], ln2)
        dh = dh + dx_ln
        # attention branch
        do, grads[p + "proj.w"], grads[p + "proj.b"] = _dense_back(dh, o, w[p + "proj.w"])
        do = do.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(B, T, d) for t in (dq, dk, dv)], axis=-1)
        da_in, grads[p + "attn.w"], grads[p + "attn.b"] = _dense_back(dqkv, a_in, w[p + "attn.w"])
        dx_ln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_back(da_in, w[p + "ln1.g"], ln1)
        dh = dh + dx_ln

    grads["wpe"] = np.zeros_like(w["wpe"])
    grads["wpe"][:T] = dh.sum(0)
    _, grads["wte.w"], grads["wte.b"] = _dense_back(dh, x, w["wte.w"])
    return {name: grads[name] for name in w}


def _check_batch(cfg, tokens, targets):
    x, _ = _as_batch(tokens, cfg)
    t = np.asarray(targets, dtype=cfg.dtype)
    if t.ndim == 2:
        t = t[None]
    if t.shape != x.shape[:2] + (cfg.n_x,):
        raise ShapeError(f"targets shape {np.shape(targets)} does not match tokens {np.shape(tokens)}")
    return x, t


def loss(w: Weights, cfg: ModelConfig, tokens, targets) -> float:
    """Mean over the batch of the time-summed squared estimation error."""
    x, t = _check_batch(cfg, tokens, targets)
    out, _, _ = _forward(w, cfg, x, keep_cache=False)
    r = out - t
    return float((r * r).sum() / x.shape[0])


def loss_and_grad(w: Weights, cfg: ModelConfig, tokens, targets) -> Tuple[float, Weights]:
    x, t = _check_batch(cfg, tokens, targets)
    out, cache, _ = _forward(w, cfg, x, keep_cache=True)
    r = out - t
    B = x.shape[0]
    value = float((r * r).sum() / B)
    return value, _backward(w, cfg, cache, (2.0 / B) * r)


def backward(w: Weights, cfg: ModelConfig, tokens, targets) -> Weights:
    return loss_and_grad(w, cfg, tokens, targets)[1]


# --- standardisation and deployment -----------------------------------------

@dataclass(frozen=True)
class Standardizer:
    u_mean: Tuple[float, ...]
    u_std: Tuple[float, ...]
    y_mean: Tuple[float, ...]
    y_std: Tuple[float, ...]
    x_mean: Tuple[float, ...]
    x_std: Tuple[float, ...]

    def __post_init__(self):
        for name in ("u_std", "y_std", "x_std"):
            if any(not s > 0 for s in getattr(self, name)):
                raise ValueError(f"{name} entries must be positive")

    @classmethod
    def fit(cls, u, y, x) -> "Standardizer":
        """Per-channel statistics over all leading axes of ``u`` (...,n_u), ``y`` (...[,n_y]), ``x`` (...,n_x)."""
        u = np.asarray(u, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == u.ndim - 1:
            y = y[..., None]

        def stats(a):
            a = a.reshape(-1, a.shape[-1])
            return tuple(float(v) for v in a.mean(0)), tuple(float(v) for v in a.std(0))

        return cls(*stats(u), *stats(y), *stats(x))

    @classmethod
    def identity(cls, cfg: ModelConfig) -> "Standardizer":
        return cls((0.0,) * cfg.n_u, (1.0,) * cfg.n_u, (0.0,) * cfg.n_y, (1.0,) * cfg.n_y,
                   (0.0,) * cfg.n_x, (1.0,) * cfg.n_x)

    def tokens(self, u, y) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == u.ndim - 1:
            y = y[..., None]
        un = (u - np.array(self.u_mean)) / np.array(self.u_std)
        yn = (y - np.array(self.y_mean)) / np.array(self.y_std)
        return np.concatenate([un, yn], axis=-1)

    def standardize_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.array(self.x_mean)) / np.array(self.x_std)

    def destandardize_x(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * np.array(self.x_std) + np.array(self.x_mean)

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in
                ("u_mean", "u_std", "y_mean", "y_std", "x_mean", "x_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(**{k: tuple(float(v) for v in d[k]) for k in
                      ("u_mean", "u_std", "y_mean", "y_std", "x_mean", "x_std")})


class MetaFilter:
    """Streaming deployment: feed (u_k, y_k) one sample at a time.

    Up to ``n_ctx`` samples the whole prefix is processed; afterwards the
    trailing ``n_ctx`` samples form a sliding window.  Each call recomputes
    the forward pass (no key/value cache).
    """

    def __init__(self, w: Weights, cfg: ModelConfig, std: Standardizer):
        self.w, self.cfg, self.std = w, cfg, std
        self._buf = np.empty((cfg.n_ctx, cfg.n_in), dtype=cfg.dtype)
        self._n = 0

    def reset(self):
        self._n = 0

    def step(self, u, y) -> np.ndarray:
        tok = self.std.tokens(np.asarray(u, dtype=np.float64), np.atleast_1d(y))
        if self._n < self.cfg.n_ctx:
            self._buf[self._n] = tok
            self._n += 1
        else:
            self._buf[:-1] = self._buf[1:]
            self._buf[-1] = tok
        out = forward(self.w, self.cfg, self._buf[:self._n])
        return self.std.destandardize_x(out[-1])


def estimate_stream(w: Weights, cfg: ModelConfig, std: Standardizer, u, y) -> np.ndarray:
    """Physical-unit estimates x_hat_{k|k} for every k of one history."""
    mf = MetaFilter(w, cfg, std)
    return np.stack([mf.step(uk, yk) for uk, yk in zip(u, y)])


_WINDOW_CHUNK = 64


def estimate_batch(w: Weights, cfg: ModelConfig, std: Standardizer, u, y) -> np.ndarray:
    """Offline counterpart of :func:`estimate_stream` with the whole record available.

    The first ``n_ctx`` rows come from one pass over the prefix; each later
    row is the last output over its trailing window, all windows stacked in
    a single batched call.  Agrees with streaming up to floating-point
    reassociation.
    """
    tok = std.tokens(u, y)
    N, n = len(tok), cfg.n_ctx
    first = forward(w, cfg, tok[:min(N, n)])
    if N <= n:
        return std.destandardize_x(first)
    starts = np.arange(1, N - n + 1)
    rest = []
    for chunk in np.array_split(starts, -(-len(starts) // _WINDOW_CHUNK)):
        idx = chunk[:, None] + np.arange(n)[None, :]
        rest.append(forward(w, cfg, tok[idx])[:, -1])
    return std.destandardize_x(np.concatenate([first] + rest))
