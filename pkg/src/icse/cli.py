"""Command-line front end: ``icse {generate,train,eval,selftest}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cf
from . import process as ps
from .checkpoint import CheckpointError, load_checkpoint
from .dataset import write_batch, write_trajectory_csv
from .evaluation import export_report, evaluate
from .trainer import TrainingDiverged, train
from .transformer import count_parameters

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("icse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--profile", choices=sorted(cf.PROFILES), help="built-in defaults")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="icse", description="In-context state estimation toolkit")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate trajectories to a batch file")
    _common(g)
    g.add_argument("--n-traj", type=int)
    g.add_argument("--horizon", type=int)

    t = sub.add_parser("train", help="train the meta-filter")
    _common(t)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("eval", help="evaluate estimators on unseen instances")
    _common(e)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--estimators", help="comma-separated subset of meta,oracle_ekf,enlarged_ekf,constant")
    e.add_argument("--n-test", type=int)
    e.add_argument("--horizon", type=int)
    e.add_argument("--deployment", choices=("streaming", "batch"))

    s = sub.add_parser("selftest", help="run the fast oracle checks")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--verbose", action="store_true")
    return ap


def resolve_config(args) -> cf.RunConfig:
    cfg = cf.load(args.config, args.profile) if args.config else cf.profile_defaults(args.profile or "desk")
    try:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=str(args.out))
        cmd = args.command
        if cmd == "generate":
            gen = cfg.generate
            if args.n_traj is not None:
                gen = replace(gen, n_traj=args.n_traj)
            if args.horizon is not None:
                gen = replace(gen, N=args.horizon)
            cfg = replace(cfg, generate=gen)
        elif cmd == "train":
            tr = cfg.train
            if args.iters is not None:
                tr = replace(tr, n_itr=args.iters)
            if args.batch_size is not None:
                tr = replace(tr, batch_size=args.batch_size)
            if args.lr is not None:
                tr = replace(tr, learning_rate=args.lr)
            cfg = replace(cfg, train=tr)
        elif cmd == "eval":
            ev = cfg.eval
            if args.estimators is not None:
                ev = replace(ev, estimators=tuple(s.strip() for s in args.estimators.split(",") if s.strip()))
            if args.n_test is not None:
                ev = replace(ev, n_test=args.n_test)
            if args.horizon is not None:
                ev = replace(ev, N=args.horizon)
            if args.deployment is not None:
                ev = replace(ev, deployment=args.deployment)
            if args.checkpoint is not None:
                ev = replace(ev, checkpoint=str(args.checkpoint))
            cfg = replace(cfg, eval=ev)
    except ValueError as exc:
        raise cf.ConfigError(str(exc)) from exc
    return cfg


def _echo_config(cfg: cf.RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cf.dumps(cfg))


def cmd_generate(cfg: cf.RunConfig) -> int:
    out = Path(cfg.out)
    _echo_config(cfg, out)
    gen = cfg.generate
    trajs = []
    print(f"{'index':>5}  {'seed':>20}")
    for i in range(gen.n_traj):
        attempt = 0
        while True:
            seed = ps.trajectory_seed(cfg.seed, i, ps.STREAM_GENERATE, attempt)
            batch, ok = ps.simulate_batch(cfg.prior, cfg.noise, gen.N, [seed])
            if ok[0]:
                break
            attempt += 1
        trajs.append(batch[0])
        print(f"{i:>5}  {seed:>20}")
    write_batch(out / "trajectories.icse", trajs, gen.N)
    csv_dir = out / "csv"
    csv_dir.mkdir(exist_ok=True)
    for i, tr in enumerate(trajs):
        write_trajectory_csv(csv_dir / f"traj_{i:04d}.csv", tr)
    print(f"wrote {len(trajs)} trajectories to {out / 'trajectories.icse'}")
    return EXIT_OK


def cmd_train(cfg: cf.RunConfig) -> int:
    out = Path(cfg.out)
    _echo_config(cfg, out)
    tc = cfg.train_config()
    every = max(1, tc.n_itr // 20)

    def progress(rec):
        if rec.iter % every == 0 or rec.iter == tc.n_itr - 1:
            log.info("iter %6d  loss %.4f  rmse %.4f  lr %.2e", rec.iter, rec.loss, rec.rmse, rec.lr)

    try:
        res = train(tc, out_dir=out, callback=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    last = res.log[-1]
    m = tc.model
    print(f"{'n_param':>10} {'n_layers':>8} {'n_heads':>7} {'n_ctx':>5} {'d_filter':>8} "
          f"{'n_itr':>7} {'b':>4} {'train time':>11} {'rmse':>7}")
    print(f"{count_parameters(m):>10} {m.n_layers:>8} {m.n_heads:>7} {m.n_ctx:>5} {m.d_filter:>8} "
          f"{tc.n_itr:>7} {tc.batch_size:>4} {last.elapsed_s / 3600:>9.3f} h {last.rmse:>7.4f}")
    if res.n_resampled:
        print(f"resampled {res.n_resampled} diverged trajectories")
    return EXIT_OK


def cmd_eval(cfg: cf.RunConfig) -> int:
    out = Path(cfg.out)
    ec = cfg.eval_config()
    meta = None
    if "meta" in ec.estimators:
        if not ec.checkpoint:
            raise UsageError("the meta estimator needs --checkpoint")
        w, mcfg, std, _ = load_checkpoint(ec.checkpoint)
        meta = (w, mcfg, std)
    _echo_config(cfg, out)
    report = evaluate(ec, meta, cfg.prior, cfg.noise, cfg.ekf_oracle, cfg.ekf_enlarged)
    export_report(report, out)
    status = EXIT_OK
    print(f"{'estimator':<14} {'mae_x1':>9} {'mae_x2':>9} {'rmse>cut':>9} {'ms/step':>16} {'fail':>5}")
    for name, r in report.estimators.items():
        print(f"{name:<14} {r.aggregate['x1']['mean']:>9.4f} {r.aggregate['x2']['mean']:>9.4f} "
              f"{r.rmse_post_transient:>9.4f} {r.latency_ms_mean:>8.3f} +/- {r.latency_ms_std:<5.3f} "
              f"{r.failures:>5}")
        if r.failures > ec.max_failure_frac * ec.n_test:
            print(f"error: {name} failed on {r.failures}/{ec.n_test} instances", file=sys.stderr)
            status = EXIT_RUNTIME
    return status


def cmd_selftest(args) -> int:
    from .selftest import run_all

    try:
        results = run_all(str(args.checkpoint) if args.checkpoint else None)
    except CheckpointError as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'}  {r.name}"
        if args.verbose:
            line += f"  measured={r.measured:.3e}  tolerance={r.tolerance:.1e}"
        print(line)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        cfg = resolve_config(args)
        return {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}[args.command](cfg)
    except (cf.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ps.SimulationDivergence, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
