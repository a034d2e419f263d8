"""Command line entry point: ``ctxnorm {fit-gmm,train,eval,gradcheck,report}``.

Exit codes: 0 success, 1 gradient check over tolerance, 2 configuration error,
3 data or format error, 4 numerical failure.
"""
import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import net as nn, runner
from .errors import ConfigError, CtxNormError

log = logging.getLogger("ctxnorm")


def _load_config(args):
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = runner.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    return cfg


def cmd_fit_gmm(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    train, _ = runner.prepare_data(cfg)
    network = runner.build_network(cfg, train, seed)
    model = runner.fit_context_gmm(network, cfg, train, seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"{cfg.run_id}_gmm.json")
    model.save(path)
    print(f"fitted K={model.k} on d={model.d} ({model.iters} iterations, "
          f"mean loglik {model.loglik:.6f}) -> {path}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    resume = None
    if args.resume:
        with open(args.resume) as fh:
            resume = json.load(fh)
    results = runner.run_experiment(cfg, cfg.output_dir, resume, args.checkpoint_every)
    code = 0
    for run_id, runs in results.items():
        for run in runs:
            if run.error:
                print(f"{run_id} seed {run.seed}: FAILED {run.error}", file=sys.stderr)
                code = max(code, run.exit_code)
            else:
                final = [r for r in run.records if r.split == "val"][-1]
                print(f"{run_id} seed {run.seed}: epoch {final.epoch} val acc {final.accuracy:.4f}")
    return code


def cmd_eval(args):
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    network, _, extra = nn.load_checkpoint(args.checkpoint)
    model = extra.get("context_model")
    model = None if model is None else runner.gmm.GmmModel.from_dict(model)
    train, val = runner.prepare_data(cfg)
    _, train, val, _ = runner._contexts_only(cfg, network, train, val, model)
    seed = int(extra.get("seed", cfg.seeds[0]))
    epoch = int(extra.get("epoch", 0))
    bs = cfg.eval_batch_size or cfg.batch_size
    splits = [("train", runner.evaluate(network, train, bs)), ("val", runner.evaluate(network, val, bs))]
    records = runner._records(cfg.run_id, seed, epoch, splits, (None, None), 0.0)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"{cfg.run_id}_eval.csv")
    runner._atomic_write(path, runner.records_to_csv(records))
    for r in records:
        print(f"{r.split}: loss {r.loss:.4f} acc {r.accuracy:.4f} f1 {r.f1:.4f}")
    return 0


def cmd_gradcheck(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    train, _ = runner.prepare_data(cfg)
    network, train, _, _ = runner.setup_seed(cfg, train, train.subset(np.arange(1)), seed)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train), size=min(args.batch, len(train)), replace=False))
    batch = train.subset(idx)
    worst, report = nn.finite_diff_check(network, batch.features, batch.labels, batch.contexts,
                                         max_entries=args.max_entries, check_input=True, rng=rng)
    for name, err in report.items():
        print(f"{name:>12s}  {err:.3e}")
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return 0 if ok else 1


def summarize_results(out_dir):
    """Aggregate every metrics CSV in ``out_dir`` into one row per run id."""
    rows = []
    for path in sorted(glob.glob(os.path.join(out_dir, "*.csv"))):
        if path.endswith("_eval.csv"):
            continue
        records = runner.read_metrics_csv(path)
        if not records:
            continue
        seeds = sorted({r.seed for r in records})
        final, best, gv = [], [], []
        for s in seeds:
            vals = [r for r in records if r.seed == s and r.split == "val"]
            final.append(max(vals, key=lambda r: r.epoch).accuracy)
            best.append(runner.best_epoch(records, s).accuracy)
            series = [r.grad_var_max for r in vals if r.grad_var_max is not None]
            if series:
                gv.append(float(np.mean(series)))
        rows.append({"run_id": records[0].run_id, "seeds": len(seeds),
                     "final_val_accuracy": float(np.mean(final)),
                     "best_val_accuracy": float(np.mean(best)),
                     "mean_grad_var_max": float(np.mean(gv)) if gv else None})
    return rows


def cmd_report(args):
    out_dir = args.out or (runner.ExperimentConfig.load(args.config).output_dir if args.config else None)
    if out_dir is None or not os.path.isdir(out_dir):
        raise ConfigError(f"results directory {out_dir!r} does not exist")
    rows = summarize_results(out_dir)
    print(f"{'run_id':<28s} {'seeds':>5s} {'final_val':>9s} {'best_val':>9s} {'gvar_max':>10s}")
    for row in rows:
        gv = "-" if row["mean_grad_var_max"] is None else f"{row['mean_grad_var_max']:.3e}"
        print(f"{row['run_id']:<28s} {row['seeds']:>5d} {row['final_val_accuracy']:>9.4f} "
              f"{row['best_val_accuracy']:>9.4f} {gv:>10s}")
    runner._atomic_write(os.path.join(out_dir, "report.json"), json.dumps(rows, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ctxnorm", description=__doc__.splitlines()[0])
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="experiment config (JSON)")
    shared.add_argument("--out", help="output directory (overrides output_dir)")
    shared.add_argument("--seed", type=int, help="run only this seed")
    shared.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-gmm", parents=[shared], help="fit the context mixture and save it")
    p.set_defaults(func=cmd_fit_gmm)
    p = sub.add_parser("train", parents=[shared], help="train every lr x seed, write CSV + summary")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also checkpoint every N epochs")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on train and val")
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of the configured net")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--max-entries", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("report", parents=[shared], help="summarize the CSVs in a results directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CtxNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return runner.exit_code_for(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
