"""Command-line surface.

Subcommands: train, corrupt, evaluate, diagnose, complexity, report, selftest.
Every command exits 0 on success and nonzero with a message on stderr on any
error; outputs are deterministic given identical inputs and seeds.
"""

import argparse
import json
import os
import sys

from . import complexity as complexity_mod
from . import config as config_mod
from . import data as data_mod
from . import diagnostics, evaluation, models, trainer
from .attacks import PerturbationSpec


def _check_device(tag):
    if tag not in ("cpu", None):
        raise RuntimeError(f"unsupported device {tag!r}: this build runs on cpu")


def cmd_train(args):
    _check_device(args.device)
    cfg = config_mod.load_config(args.config)
    run, train_ds, test_ds = config_mod.build_run(cfg, out_dir=args.out, seed=args.seed)
    if run.run_dir is None:
        raise RuntimeError("no output directory: pass --out or set out.run_dir in the config")
    os.makedirs(run.run_dir, exist_ok=True)
    with open(os.path.join(run.run_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    result = trainer.train(run, train_ds, test_ds)
    last = result.history[-1]
    print(f"run dir: {result.run_dir}")
    print(f"final epoch {last['epoch']}: train_rob_acc={last['train_rob_acc']:.2f} "
          f"test_rob_acc={last['test_rob_acc']}")
    print(f"best epoch {result.best_epoch}: robust_acc={100 * result.best_robust_acc:.2f}")
    return 0


def cmd_corrupt(args):
    ds = data_mod.load_dataset(args.data)
    spec = data_mod.CorruptionSpec(noise_rate=args.rate, seed=args.seed or 0)
    out = data_mod.corrupt_labels(ds, spec)
    data_mod.save_dataset(out, args.out)
    changed = int((out.labels != ds.labels).sum())
    print(f"corrupted copy written to {args.out} ({changed} labels changed)")
    return 0


def _suite_from_names(names, epsilon, seed):
    full = evaluation.default_suite(epsilon=epsilon, seed=seed)
    if not names:
        return full
    known = dict(full.entries)
    entries = []
    for name in names:
        if name not in known:
            raise RuntimeError(f"unknown suite attack {name!r} (have {sorted(known)})")
        entries.append((name, known[name]))
    return evaluation.AttackSuite(entries=tuple(entries))


def cmd_evaluate(args):
    _check_device(args.device)
    ds = data_mod.load_dataset(args.data)
    suite = _suite_from_names(args.suite, args.epsilon, args.seed or 0)
    best = args.ckpt
    final = args.final_ckpt or args.ckpt
    rows = evaluation.run_suite(best, final, ds, suite, method=args.method)
    os.makedirs(args.out, exist_ok=True)
    evaluation.write_report_csv(rows, os.path.join(args.out, "report.csv"))
    table = evaluation.render_report(rows)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(table)
    print(table, end="")
    return 0


def cmd_diagnose(args):
    _check_device(args.device)
    ds = data_mod.load_dataset(args.data)
    params, _, _ = models.load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    batch = data_mod.full_batch(data_mod.subset(ds, min(args.batch, len(ds))))
    spec = PerturbationSpec(epsilon=args.epsilon, step_size=args.epsilon / 4,
                            steps=args.steps, random_start=True, seed=args.seed or 0)
    rows = []
    for method in ("pgd_at", "trades"):
        r = diagnostics.grad_norm_terms(params, batch, method, spec)
        r["epoch"] = ""
        rows.append(r)
    diagnostics.write_grad_norms_csv(rows, os.path.join(args.out, "grad_norms.csv"))
    sweep = diagnostics.make_sweep(params, args.lambdas, seed=args.seed or 0)
    records = diagnostics.direction_sweep(params, batch, sweep,
                                          diagnostics.SWEEP_LOSS_KINDS, spec)
    diagnostics.write_sweep_csv(records, os.path.join(args.out, "sweep.csv"))
    losses = diagnostics.per_sample_adv_loss(
        params, ds, PerturbationSpec(epsilon=args.epsilon, step_size=args.epsilon / 4,
                                     steps=args.steps, random_start=False, seed=args.seed or 0))
    diagnostics.write_sample_losses_csv(losses, os.path.join(args.out, "sample_losses.csv"))
    if args.ckpt2:
        params2, _, _ = models.load_checkpoint(args.ckpt2)
        khat = diagnostics.estimate_lipschitz(params, batch, spec, sample_count=8,
                                              seed=args.seed or 0)
        report = diagnostics.theorem1_probe(params, params2, batch, spec, khat.k_hat)
        diagnostics.write_theorem1_csv(report, os.path.join(args.out, "theorem1.csv"))
        losses2 = diagnostics.per_sample_adv_loss(
            params2, ds, PerturbationSpec(epsilon=args.epsilon, step_size=args.epsilon / 4,
                                          steps=args.steps, random_start=False,
                                          seed=args.seed or 0))
        tau = diagnostics.kendall_tau(losses.tolist(), losses2.tolist())
        diagnostics.write_tau(tau, os.path.join(args.out, "tau.txt"))
    print(f"diagnostics written to {args.out}")
    return 0


def cmd_complexity(args):
    _check_device(args.device)
    ds = data_mod.load_dataset(args.data)
    params, _, meta = models.load_checkpoint(args.ckpt)
    spec = PerturbationSpec(epsilon=args.epsilon, step_size=args.epsilon / 4,
                            steps=args.steps, random_start=False, seed=args.seed or 0)
    report = complexity_mod.complexity_report(params, ds, spec)
    os.makedirs(args.out, exist_ok=True)
    run_id = meta.get("config_hash") or os.path.basename(os.path.normpath(args.ckpt))
    complexity_mod.write_complexity_csv(report, os.path.join(args.out, "complexity.csv"),
                                        run_id=run_id)
    print(f"margin={report.margin.value:.4f} spectral={report.spectral_complexity:.4g} "
          f"l1={report.l1_complexity:.4g} curvature={report.input_curvature.mean:.4g} "
          f"flatness={report.weight_flatness.mean:.4g}")
    return 0


def cmd_report(args):
    history_path = os.path.join(args.run, "history.csv")
    if not os.path.isfile(history_path):
        raise RuntimeError(f"no history.csv under {args.run}")
    history = trainer.history_from_csv(history_path)
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    evaluation.emit_curves(history, os.path.join(out, "curves.csv"))
    evaluated = [r for r in history if r["test_rob_acc"] is not None]
    if not evaluated:
        raise RuntimeError("history holds no evaluated epochs")
    best = max(evaluated, key=lambda r: r["test_rob_acc"])
    final = evaluated[-1]
    rows = [
        evaluation.ReportRow(method=args.method, metric="natural",
                             best=best["test_nat_acc"], final=final["test_nat_acc"]),
        evaluation.ReportRow(method=args.method, metric="robust",
                             best=best["test_rob_acc"], final=final["test_rob_acc"]),
    ]
    evaluation.write_report_csv(rows, os.path.join(out, "report.csv"))
    table = evaluation.render_report(rows)
    print(table, end="")
    if args.charts:
        _render_charts(history, out)
    return 0


def _render_charts(history, out):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise RuntimeError("chart rendering needs matplotlib") from e
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in history]
    for series in ("train_nat_acc", "train_rob_acc", "test_nat_acc", "test_rob_acc"):
        ys = [r[series] for r in history]
        ax.plot(epochs, ys, label=series)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out, "curves.png"), dpi=120)
    plt.close(fig)


def cmd_selftest(args):
    from .selftest import run_selftest
    return 0 if run_selftest() else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="atlab",
                                     description="adversarial training laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", default=None, help="accelerator tag (cpu only)")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="run directory (overrides config)")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("corrupt", help="persist a label-corrupted dataset copy")
    p.add_argument("--data", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("evaluate", help="run an attack suite over checkpoints")
    p.add_argument("--ckpt", required=True, help="best checkpoint directory")
    p.add_argument("--final-ckpt", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", nargs="*", default=None)
    p.add_argument("--epsilon", type=float, default=8.0 / 255.0)
    p.add_argument("--method", default="model")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("diagnose", help="gradient norms, sweeps, per-sample losses")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ckpt2", default=None, help="second snapshot for the bound probe")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=8.0 / 255.0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lambdas", type=float, nargs="*",
                   default=(-0.05, -0.025, 0.0, 0.025, 0.05))
    common(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("complexity", help="complexity measures of a snapshot")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=8.0 / 255.0)
    p.add_argument("--steps", type=int, default=10)
    common(p)
    p.set_defaults(fn=cmd_complexity)

    p = sub.add_parser("report", help="table and curve data from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--method", default="run")
    p.add_argument("--charts", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("selftest", help="run the oracle self-checks")
    p.set_defaults(fn=cmd_selftest)
    return parser


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(cli())
