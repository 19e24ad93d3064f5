"""Train the desk-scale meta-filter, then compare it with both EKFs.

    python scripts/run_desk_experiment.py --out runs/desk --n-test 20

Writes the training artefacts under OUT/train and the evaluation tables
under OUT/eval, and prints the held-out rmse ratio against the untrained
model.
"""
import argparse
import logging
from pathlib import Path

from icse import config as cf
from icse.checkpoint import load_checkpoint
from icse.evaluation import EvalConfig, evaluate, export_report
from icse.trainer import batch_arrays, heldout_batch, state_rmse, train
from icse.transformer import init_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--n-test", type=int, default=20)
    ap.add_argument("--horizon", type=int, default=500)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = cf.profile_defaults("desk", seed=args.seed)
    tc = run.train_config()
    if args.iters:
        from dataclasses import replace
        tc = replace(tc, n_itr=args.iters)

    def progress(rec):
        if rec.iter % 100 == 0:
            logging.info("iter %5d  rmse %.4f  %.0f s", rec.iter, rec.rmse, rec.elapsed_s)

    res = train(tc, out_dir=args.out / "train", callback=progress)
    tok, tgt = batch_arrays(heldout_batch(tc, 32), res.standardizer)
    before = state_rmse(init_weights(tc.model, tc.seed), tc.model, tok, tgt)
    after = state_rmse(res.weights, tc.model, tok, tgt)
    print(f"held-out rmse: untrained {before:.4f}  trained {after:.4f}  ratio {after / before:.3f}")
    print(f"training time: {res.log[-1].elapsed_s / 60:.1f} min")

    w, mcfg, std, _ = load_checkpoint(args.out / "train" / "checkpoint.ckpt")
    ec = EvalConfig(n_test=args.n_test, N=args.horizon,
                    estimators=("meta", "oracle_ekf", "enlarged_ekf", "constant"), seed=run.eval.seed)
    report = evaluate(ec, (w, mcfg, std), run.prior, run.noise, run.ekf_oracle, run.ekf_enlarged)
    export_report(report, args.out / "eval")
    print(f"{'estimator':<14} {'mae_x1':>8} {'mae_x2':>8} {'x1 k>=50':>9} {'ms/step':>8}")
    for name, r in report.estimators.items():
        print(f"{name:<14} {r.aggregate['x1']['mean']:>8.3f} {r.aggregate['x2']['mean']:>8.3f} "
              f"{r.mae_post_transient[0]:>9.3f} {r.latency_ms_mean:>8.3f}")


if __name__ == "__main__":
    main()
