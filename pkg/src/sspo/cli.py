"""Command-line front end.

Usage::

    sspo [--config FILE] [--seed N] [--out DIR] [--strategy S] [--ssr M] COMMAND ...

Commands: ``pretrain``, ``sft``, ``sspo``, ``study {erd,ablation}``,
``check {gradcheck,theorem2,replay-stats}`` and ``eval``.

Settings resolve as built-in defaults, then the ``--config`` file, then
flags. Output goes to ``--out``; without it, to ``$SSPO_RUN_DIR/<command>``,
or ``./runs/<command>`` when the variable is unset.

Exit codes: 0 success, 1 configuration or input error, 2 diverged loss,
3 a check exceeded its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from . import trainer
from .config import TrainConfig, dump_config, load_config
from .errors import ConfigError, DivergedLoss, SSPOError
from .numerics import SeededRng
from .policy import load_params, save_params
from .taskbench import checks, studies
from .taskbench.tasks import evaluate, task_from_params

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_TOLERANCE = 0, 1, 2, 3

log = logging.getLogger("sspo")


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI-style config file")
    parser.add_argument("--seed", type=int, default=default, help="overrides [train] seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--strategy", choices=["init", "last", "uniform"], default=default,
                        help="checkpoint replay strategy")
    parser.add_argument("--ssr", choices=["off", "sign", "indicator"], default=default,
                        help="self-sampling sign handling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sspo", description="Checkpoint-replay preference "
                                     "alignment of a toy conditional diffusion model.")
    _global_options(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    shared = argparse.ArgumentParser(add_help=False)
    _global_options(shared, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[shared], help="fit the base model on the base mixture")
    for name, text in (("sft", "fine-tune on winning samples only"),
                       ("sspo", "align with checkpoint replay")):
        p = sub.add_parser(name, parents=[shared], help=text)
        p.add_argument("--init", help="start from this checkpoint instead of pretraining")

    p = sub.add_parser("study", parents=[shared], help="multi-seed comparisons")
    p.add_argument("kind", choices=["erd", "ablation"])
    p.add_argument("--seeds", help="comma separated; defaults to [study] seeds")

    p = sub.add_parser("check", parents=[shared], help="oracle checks with tolerances")
    p.add_argument("kind", choices=["gradcheck", "theorem2", "replay-stats"])
    p.add_argument("--cases", type=int, default=20, help="gradcheck: number of random cases")
    p.add_argument("--draws", type=int, default=100_000, help="replay-stats: draws per store")

    p = sub.add_parser("eval", parents=[shared], help="score a checkpoint against the target")
    p.add_argument("checkpoint")
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.strategy is not None:
        changes["erd_strategy"] = args.strategy
    if args.ssr is not None:
        changes["ssr_mode"] = args.ssr
    return cfg.replace(**changes) if changes else cfg


def output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("SSPO_RUN_DIR")
    return Path(root if root else "runs") / args.command


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _initial(args, cfg):
    if getattr(args, "init", None):
        return load_params(args.init, cfg.policy_spec)
    return trainer.pretrain(cfg)[0]


def cmd_pretrain(args, cfg, out):
    policy, losses = trainer.pretrain(cfg)
    _write(out / "config.snapshot", dump_config(cfg))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss"))
    w.writerows((i + 1, repr(v)) for i, v in enumerate(losses))
    _write(out / "pretrain.csv", buf.getvalue())
    save_params(policy, out / "theta0.sspockpt", iteration=0, seed=cfg.seed)
    heldout = trainer.pretrain_heldout_loss(policy, cfg)
    print(f"held-out noise loss {heldout:.6f}; checkpoint {out / 'theta0.sspockpt'}")
    return EXIT_OK


def _report_run(result, out):
    print(f"{result.method}: initial {result.initial_score:.6f} final {result.final_score:.6f} "
          f"peak {result.peak_score:.6f} (energy distance, lower is better)")
    print(f"run directory {out}")


def cmd_sspo(args, cfg, out):
    result = trainer.sspo_train(cfg, _initial(args, cfg), out)
    trainer.save_final(result, out, cfg)
    _report_run(result, out)
    return EXIT_OK


def cmd_sft(args, cfg, out):
    result = trainer.sft_train(cfg, _initial(args, cfg), out)
    trainer.save_final(result, out, cfg)
    _report_run(result, out)
    return EXIT_OK


def _curves_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "seed", "step", "eval_score"))
    for variant in report.variants:
        for seed in report.seeds:
            r = report.result(variant, seed)
            if r is None:
                continue
            w.writerow((variant, seed, 0, repr(r.initial_score)))
            w.writerows((variant, seed, step, repr(e.energy_distance)) for step, e in r.evals)
    return buf.getvalue()


def cmd_study(args, cfg, out):
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds)
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
    run = studies.run_erd_study if args.kind == "erd" else studies.run_ablation_suite
    report = run(cfg, seeds, out)
    _write(out / "config.snapshot", dump_config(cfg))
    _write(out / "curves.csv", _curves_csv(report))
    print(report.summary_csv(), end="")
    for variant in report.variants:
        var = [report.score_step_variance(variant, s) for s in report.seeds]
        print(f"{variant}: inter-step score variance " + " ".join(f"{v:.3g}" for v in var))
    for (variant, seed), msg in sorted(report.failures.items()):
        print(f"FAILED {variant} seed {seed}: {msg}", file=sys.stderr)
    return EXIT_OK


def cmd_check(args, cfg, out):
    bad = []
    if args.kind == "gradcheck":
        cases = checks.gradcheck(args.cases, cfg.seed, schedule=cfg.schedule)
        for c in cases:
            print(f"case {c.index:3d} mode={c.mode:9s} sign={c.sign:+d} rel_err={c.rel_error:.3e} "
                  f"weight_err={c.weight_error:.3e}")
            if not (c.rel_error < checks.GRAD_TOL and c.weight_error < checks.WEIGHT_TOL):
                bad.append(c)
        print(f"max relative error {max(c.rel_error for c in cases):.3e} (tolerance {checks.GRAD_TOL:g})")
    elif args.kind == "theorem2":
        cases = checks.theorem2_grid(cfg.seed)
        for c in cases:
            if not (c.identity_error < checks.IDENTITY_TOL and c.orderings_agree):
                bad.append(c)
        zero = [c for c in cases if not any(c.bias1)]
        print(f"{len(cases)} grid points; max identity error "
              f"{max(c.identity_error for c in cases):.3e}; zero-bias KL values "
              f"{sorted({c.kl_1 for c in zero})}")
    else:
        cases = checks.replay_stats(n_draws=args.draws, seed=cfg.seed)
        for c in cases:
            freq = " ".join(f"{f:.4f}" for f in c.frequencies)
            print(f"{c.strategy:8s} k={c.k:2d} p={c.p_value:.4f} freq=[{freq}]")
            if not c.passed:
                bad.append(c)
    for c in bad:
        print(f"TOLERANCE VIOLATION: {c}", file=sys.stderr)
    return EXIT_TOLERANCE if bad else EXIT_OK


def cmd_eval(args, cfg, out):
    policy = load_params(args.checkpoint, cfg.policy_spec)
    rep = evaluate(policy, task_from_params(cfg.task), cfg.schedule,
                   SeededRng(cfg.seed).child(trainer.KEY_EVAL), cfg.eval_samples)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("condition", "energy_distance"))
    w.writerows((c, repr(v)) for c, v in enumerate(rep.per_condition))
    w.writerow(("pooled", repr(rep.energy_distance)))
    _write(out / "eval.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    print(f"held-out noise loss on target {rep.eps_mse:.6f}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "sspo": cmd_sspo, "sft": cmd_sft,
            "study": cmd_study, "check": cmd_check, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, output_dir(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SSPOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
