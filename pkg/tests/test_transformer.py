import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icse.transformer import (MetaFilter, ModelConfig, ShapeError, Standardizer,
                              attention_probabilities, count_parameters, estimate_batch,
                              estimate_stream, forward, gelu, init_weights, loss, loss_and_grad,
                              parameter_shapes)

from conftest import TOY, random_weights


def naive_forward(w, cfg, tok):
    """Token-by-token reference: explicit loops over time and heads."""
    T = len(tok)
    d, H = cfg.d_filter, cfg.n_heads
    hd = d // H

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((vi - mu) ** 2 for vi in v) / len(v)
        return (v - mu) / math.sqrt(var + 1e-5) * g + b

    def act(z):
        return 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))

    h = [tok[t] @ w["wte.w"] + w["wte.b"] + w["wpe"][t] for t in range(T)]
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = [ln(h[t], w[p + "ln1.g"], w[p + "ln1.b"]) for t in range(T)]
        qkv = [a[t] @ w[p + "attn.w"] + w[p + "attn.b"] for t in range(T)]
        o = [np.zeros(d) for _ in range(T)]
        for head in range(H):
            sl = slice(head * hd, (head + 1) * hd)
            for t in range(T):
                q = qkv[t][:d][sl]
                scores = [q @ qkv[s][d:2 * d][sl] / math.sqrt(hd) for s in range(t + 1)]
                m = max(scores)
                e = [math.exp(sc - m) for sc in scores]
                z = sum(e)
                o[t][sl] = sum(e[s] / z * qkv[s][2 * d:][sl] for s in range(t + 1))
        h = [h[t] + o[t] @ w[p + "proj.w"] + w[p + "proj.b"] for t in range(T)]
        m_ = [ln(h[t], w[p + "ln2.g"], w[p + "ln2.b"]) for t in range(T)]
        h = [h[t] + act(m_[t] @ w[p + "fc.w"] + w[p + "fc.b"]) @ w[p + "out.w"] + w[p + "out.b"]
             for t in range(T)]
    return np.stack([ln(h[t], w["lnf.g"], w["lnf.b"]) @ w["head.w"] + w["head.b"] for t in range(T)])


def test_parameter_count_table2():
    cfg = ModelConfig(n_layers=12, n_heads=4, n_ctx=500, d_filter=128)
    assert count_parameters(cfg) == 2_444_290
    assert 2.40e6 <= count_parameters(cfg) <= 2.50e6


def test_parameter_count_formula():
    cfg = ModelConfig(n_layers=3, n_heads=2, n_ctx=10, d_filter=8)
    d, L = 8, 3
    per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    expect = (3 * d + d) + 10 * d + L * per_layer + 2 * d + (d * 2 + 2)
    assert count_parameters(cfg) == expect == sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def test_init_head_zero_and_std():
    cfg = ModelConfig(n_layers=4, n_heads=4, n_ctx=128, d_filter=64)
    w = init_weights(cfg, 0)
    assert not w["head.w"].any() and not w["head.b"].any()
    assert abs(w["h0.fc.w"].std() - 0.02) < 0.002
    np.testing.assert_array_equal(w["h1.ln2.g"], 1.0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(forward(w, cfg, x), 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_heads=3, d_filter=128)
    with pytest.raises(ValueError):
        ModelConfig(dropout=0.1)


def test_matches_naive_reference():
    w = random_weights(TOY, 1)
    tok = np.random.default_rng(1).normal(size=(TOY.n_ctx, TOY.n_in))
    np.testing.assert_allclose(forward(w, TOY, tok), naive_forward(w, TOY, tok), rtol=0, atol=1e-10)


def test_zero_layers_is_affine_readout():
    cfg = ModelConfig(n_layers=0, n_heads=2, n_ctx=4, d_filter=8)
    w = random_weights(cfg, 2)
    tok = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_allclose(forward(w, cfg, tok), naive_forward(w, cfg, tok), atol=1e-12)


def test_gelu_reference_values():
    np.testing.assert_allclose(gelu(np.array([0.0, 1.0, -1.0])), [0.0, 0.8411919906082768, -0.15880800939172324],
                               rtol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_causality(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=2, n_heads=2, n_ctx=10, d_filter=8)
    w = random_weights(cfg, seed)
    T = int(rng.integers(2, cfg.n_ctx + 1))
    j = int(rng.integers(1, T))
    tok = rng.normal(size=(T, cfg.n_in))
    tok2 = tok.copy()
    tok2[j:] = rng.normal(0, 10, tok2[j:].shape)
    np.testing.assert_array_equal(forward(w, cfg, tok)[:j], forward(w, cfg, tok2)[:j])


def test_attention_rows_sum_to_one_and_are_causal():
    w = random_weights(TOY, 3)
    tok = np.random.default_rng(3).normal(size=(2, 6, 3))
    for att in attention_probabilities(w, TOY, tok):
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-12)
        assert np.all(np.triu(att, 1) == 0)


def test_permutation_changes_output():
    # learned positions: reordering the past must matter
    w = random_weights(TOY, 4)
    tok = np.random.default_rng(4).normal(size=(6, 3))
    perm = tok[[1, 0, 2, 3, 4, 5]]
    assert not np.allclose(forward(w, TOY, tok)[-1], forward(w, TOY, perm)[-1])


def test_batch_rows_independent():
    w = random_weights(TOY, 5)
    tok = np.random.default_rng(5).normal(size=(3, 6, 3))
    out = forward(w, TOY, tok)
    for b in range(3):
        np.testing.assert_allclose(out[b], forward(w, TOY, tok[b]), atol=1e-13)


def test_shape_errors():
    w = random_weights(TOY)
    with pytest.raises(ShapeError):
        forward(w, TOY, np.zeros((7, 3)))
    with pytest.raises(ShapeError):
        forward(w, TOY, np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        loss(w, TOY, np.zeros((1, 4, 3)), np.zeros((1, 5, 2)))


def test_loss_matches_loop():
    rng = np.random.default_rng(6)
    w = random_weights(TOY, 6)
    tok = rng.normal(size=(3, 6, 3))
    tgt = rng.normal(size=(3, 6, 2))
    ref = sum(np.sum((naive_forward(w, TOY, tok[b]) - tgt[b]) ** 2) for b in range(3)) / 3
    assert loss(w, TOY, tok, tgt) == pytest.approx(ref, rel=1e-12)


def test_gradient_central_differences():
    rng = np.random.default_rng(0)
    w = random_weights(TOY, 7)
    tok = rng.normal(size=(2, 6, 3))
    tgt = rng.normal(size=(2, 6, 2))
    _, g = loss_and_grad(w, TOY, tok, tgt)
    h = 1e-5
    for k in ("wte.w", "wpe", "h0.attn.w", "h1.fc.b", "h1.ln2.g", "lnf.b", "head.w"):
        arr = w[k]
        for idx in list(np.ndindex(arr.shape))[:12]:
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(w, TOY, tok, tgt)
            arr[idx] = old - h
            lm = loss(w, TOY, tok, tgt)
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[k][idx]) <= 1e-4 * max(abs(fd), abs(g[k][idx]), 1e-5), k


def test_gradient_zero_at_exact_fit():
    w = random_weights(TOY, 8)
    tok = np.random.default_rng(8).normal(size=(2, 6, 3))
    value, g = loss_and_grad(w, TOY, tok, forward(w, TOY, tok))
    assert value == 0.0
    assert all(not v.any() for v in g.values())


def test_gradient_linear_in_residual():
    # loss = sum r^2 / B, so doubling the residual doubles the head-bias gradient
    w = random_weights(TOY, 9)
    tok = np.random.default_rng(9).normal(size=(2, 6, 3))
    out = forward(w, TOY, tok)
    r = np.random.default_rng(10).normal(size=out.shape)
    _, g1 = loss_and_grad(w, TOY, tok, out - r)
    _, g2 = loss_and_grad(w, TOY, tok, out - 2 * r)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(g1["head.b"], 2 * r.sum((0, 1)) / 2, rtol=1e-12)


def test_stream_matches_batch_and_slides():
    cfg = ModelConfig(n_layers=1, n_heads=2, n_ctx=5, d_filter=8)
    w = random_weights(cfg, 11)
    std = Standardizer.identity(cfg)
    rng = np.random.default_rng(11)
    u, y = rng.normal(size=(13, 2)), rng.normal(size=13)
    s = estimate_stream(w, cfg, std, u, y)
    b = estimate_batch(w, cfg, std, u, y)
    np.testing.assert_allclose(s, b, atol=1e-12)
    tok = std.tokens(u, y)
    # after n_ctx samples the estimate depends only on the trailing window
    np.testing.assert_allclose(s[9], forward(w, cfg, tok[5:10])[-1], atol=1e-12)
    np.testing.assert_allclose(s[3], forward(w, cfg, tok[:4])[-1], atol=1e-12)


def test_metafilter_reset():
    cfg = ModelConfig(n_layers=1, n_heads=2, n_ctx=4, d_filter=8)
    mf = MetaFilter(random_weights(cfg, 12), cfg, Standardizer.identity(cfg))
    a = mf.step([1.0, 2.0], 3.0)
    mf.step([0.0, 0.0], 0.0)
    mf.reset()
    np.testing.assert_array_equal(mf.step([1.0, 2.0], 3.0), a)


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_standardizer_roundtrip(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(5, 3, (4, 20, 2))
    y = rng.normal(-1, 2, (4, 20))
    x = rng.normal(30, 7, (4, 20, 2))
    std = Standardizer.fit(u, y, x)
    tok = std.tokens(u, y)
    np.testing.assert_allclose(tok.reshape(-1, 3).mean(0), 0.0, atol=1e-10)
    np.testing.assert_allclose(tok.reshape(-1, 3).std(0), 1.0, atol=1e-10)
    np.testing.assert_allclose(std.destandardize_x(std.standardize_x(x)), x, rtol=1e-13)
    assert Standardizer.from_dict(std.to_dict()) == std
