"""Oracle vs enlarged-state EKF on unseen instances (no training needed).

    python scripts/compare_filters.py --n-test 20 --horizon 500

Also reports how far the enlarged filter's UA2 estimate moves toward the
true value.
"""
import argparse

import numpy as np

from icse.ekf import EkfConfig, filter_params, run_filter
from icse.evaluation import EvalConfig, make_test_set


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-test", type=int, default=20)
    ap.add_argument("--horizon", type=int, default=500)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    trajs = make_test_set(EvalConfig(n_test=args.n_test, N=args.horizon, seed=args.seed,
                                     estimators=("oracle_ekf",)))
    rows = {}
    ua2_err = []
    for name, cfg in (("oracle_ekf", EkfConfig.oracle()), ("enlarged_ekf", EkfConfig.enlarged())):
        err, ms = [], []
        for tr in trajs:
            run = run_filter(tr.inputs, tr.outputs, cfg, filter_params(cfg, tr.params))
            err.append(np.abs(run.estimates[:, :2] - tr.clean_states))
            ms.append(run.latency_s[1:].mean() * 1e3)
            if cfg.mode == "enlarged":
                ua2_err.append((abs(cfg.x0_guess[2] - tr.params.UA2), abs(run.estimates[-1, 2] - tr.params.UA2)))
        E = np.stack(err)
        rows[name] = (E[..., 0].mean(), E[..., 1].mean(), float(np.mean(ms)))
    print(f"{'filter':<14} {'mae_x1':>8} {'mae_x2':>8} {'ms/step':>8}")
    for name, (a, b, c) in rows.items():
        print(f"{name:<14} {a:>8.3f} {b:>8.3f} {c:>8.3f}")
    e0, e1 = np.array(ua2_err).T
    print(f"|UA2 error| median: initial {np.median(e0):.3f} -> final {np.median(e1):.3f}")


if __name__ == "__main__":
    main()
