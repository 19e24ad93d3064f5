import json

import numpy as np
import pytest

from icse import process as ps
from icse.evaluation import (AGG_HEADER, ConstantEstimator, EkfEstimator, EvalConfig,
                             FunctionEstimator, MetaEstimator, aggregate_stats, evaluate,
                             evaluate_estimators, export_estimates, export_report, make_test_set,
                             read_aggregate_csv, read_series_csv, summarize)
from icse.ekf import EkfConfig
from icse.transformer import ModelConfig, Standardizer

from conftest import random_weights


@pytest.fixture(scope="module")
def trajs():
    return make_test_set(EvalConfig(n_test=4, N=60, transient_cutoff=10, estimators=("constant",)))


def test_perfect_estimator_scores_zero(trajs):
    perfect = FunctionEstimator("perfect", lambda tr: tr.clean_states)
    r = evaluate_estimators([perfect], trajs, cutoff=10).estimators["perfect"]
    assert r.rmse_post_transient == 0.0 and r.aggregate["x1"]["max"] == 0.0
    assert not r.error_mean.any() and r.failures == 0


def test_constant_estimator_matches_naive_statistics(trajs):
    r = evaluate_estimators([ConstantEstimator()], trajs, cutoff=10).estimators["constant"]
    E = np.stack([np.abs(t.clean_states - ps.X_SS) for t in trajs])
    np.testing.assert_allclose(r.error_mean, E.mean(0), rtol=1e-14)
    np.testing.assert_allclose(r.error_std, E.std(0), rtol=1e-12, atol=1e-14)
    assert r.aggregate["x1"]["mean"] == pytest.approx(E[..., 0].mean())
    assert r.aggregate["x2"]["median"] == pytest.approx(np.median(E[..., 1]))
    assert r.rmse_post_transient == pytest.approx(np.sqrt(np.mean(E[:, 10:] ** 2)))
    assert r.mae_post_transient[0] == pytest.approx(E[:, 10:, 0].mean())


def test_aggregate_stats():
    s = aggregate_stats(np.arange(1, 6, dtype=float))
    assert (s["min"], s["q1"], s["median"], s["q3"], s["max"]) == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert s["mean"] == 3.0 and s["std"] == pytest.approx(np.sqrt(2.0))


def test_failures_are_isolated(trajs):
    bad_seed = trajs[1].seed

    def flaky(tr):
        if tr.seed == bad_seed:
            raise FloatingPointError("boom")
        return tr.clean_states

    def nan_out(tr):
        return np.full((len(tr), 2), np.nan)

    rep = evaluate_estimators([FunctionEstimator("flaky", flaky), FunctionEstimator("nan", nan_out),
                               ConstantEstimator()], trajs, cutoff=10)
    assert rep.estimators["flaky"].failures == 1 and rep.estimators["flaky"].n_ok == 3
    assert rep.estimators["nan"].failures == 4 and np.isnan(rep.estimators["nan"].rmse_post_transient)
    assert rep.estimators["constant"].failures == 0


def test_same_instances_for_every_estimator():
    cfg = EvalConfig(n_test=3, N=20, transient_cutoff=5, estimators=("constant",), seed=4)
    a = [t.seed for t in make_test_set(cfg)]
    assert a == [t.seed for t in make_test_set(cfg)]
    other = EvalConfig(n_test=3, N=20, transient_cutoff=5, estimators=("constant",), seed=5)
    assert not set(a) & {t.seed for t in make_test_set(other)}


def test_export_golden_headers_and_parse_back(tmp_path, trajs):
    rep = evaluate_estimators([ConstantEstimator(), FunctionEstimator("zero", lambda tr: 0 * tr.clean_states)],
                              trajs, cutoff=10)
    export_report(rep, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "aggregate.csv", "error_x1.csv", "error_x2.csv", "summary.json", "timing.csv"]
    first = (tmp_path / "error_x1.csv").read_text().splitlines()[0]
    assert first == "t,constant_mean,constant_std,zero_mean,zero_std"
    assert (tmp_path / "timing.csv").read_text().splitlines()[0] == \
        "t,constant_mean_ms,constant_std_ms,zero_mean_ms,zero_std_ms"
    assert (tmp_path / "aggregate.csv").read_text().splitlines()[0] == ",".join(AGG_HEADER)
    t, cols = read_series_csv(tmp_path / "error_x2.csv")
    np.testing.assert_array_equal(t, np.arange(60))
    np.testing.assert_array_equal(cols["zero_mean"], rep.estimators["zero"].error_mean[:, 1])
    agg = read_aggregate_csv(tmp_path / "aggregate.csv")
    assert agg[("constant", "x1")] == rep.estimators["constant"].aggregate["x1"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"constant", "zero"}
    assert summary["constant"]["failures"] == 0


def test_export_empty_raises(tmp_path):
    rep = evaluate_estimators([ConstantEstimator()], make_test_set(
        EvalConfig(n_test=1, N=5, transient_cutoff=0, estimators=("constant",))), cutoff=0)
    rep.estimators.clear()
    with pytest.raises(ValueError):
        export_report(rep, tmp_path)


def test_export_estimates(tmp_path):
    export_estimates(tmp_path / "e.csv", np.array([[1.0, 2.0], [3.0, 4.5]]))
    assert (tmp_path / "e.csv").read_text() == "t,x1_hat,x2_hat\n0,1.0,2.0\n1,3.0,4.5\n"


def test_meta_streaming_and_batch_agree(trajs):
    cfg = ModelConfig(n_layers=1, n_heads=2, n_ctx=16, d_filter=8)
    w = random_weights(cfg, 0, scale=0.05)
    std = Standardizer.fit(*ps.stack_batch(trajs))
    a, lat = MetaEstimator(w, cfg, std, "streaming").run(trajs[0])
    b, _ = MetaEstimator(w, cfg, std, "batch").run(trajs[0])
    np.testing.assert_allclose(a, b, rtol=1e-10)
    assert lat.shape == (60,) and np.all(lat > 0)


def test_evaluate_protocol_runs_ekfs():
    cfg = EvalConfig(n_test=2, N=40, transient_cutoff=5, estimators=("oracle_ekf", "enlarged_ekf", "constant"))
    rep = evaluate(cfg)
    assert list(rep.estimators) == ["oracle_ekf", "enlarged_ekf", "constant"]
    assert all(r.failures == 0 for r in rep.estimators.values())
    assert rep.estimators["oracle_ekf"].latency_ms_mean > 0


def test_meta_requires_checkpoint():
    with pytest.raises(ValueError):
        evaluate(EvalConfig(n_test=1, N=10, transient_cutoff=0, estimators=("meta",)))


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(estimators=("kalman",))
    with pytest.raises(ValueError):
        EvalConfig(N=50, transient_cutoff=50)
    with pytest.raises(ValueError):
        EvalConfig(deployment="parallel")


def test_summarize_empty():
    r = summarize("x", [], [], 3, 10, 2)
    assert r.failures == 3 and r.n_ok == 0 and np.isnan(r.error_mean).all()
