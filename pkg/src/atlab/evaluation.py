"""Robustness evaluation: accuracy under configured attacks, best/final/diff
report rows, and learning-curve emission."""

import csv
import os
from dataclasses import dataclass, replace

import torch

from . import models
from .attacks import PerturbationSpec, pgd_attack
from .data import ExampleBatch
from .rng import derive_seed


class EvaluationError(ValueError):
    pass


def evaluate(params, dataset, spec=None, batch_size=512):
    """Fraction of (adversarially perturbed) test inputs classified correctly.

    spec=None scores natural accuracy. Deterministic in spec.seed; per-batch
    attack seeds are derived so results do not depend on batch_size splits
    only through the random start draws.
    """
    n = len(dataset)
    correct = 0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        batch = ExampleBatch(inputs=dataset.inputs[sl], labels=dataset.labels[sl],
                             sample_ids=dataset.sample_ids[sl])
        x = batch.inputs
        if spec is not None:
            bspec = replace(spec, seed=derive_seed(spec.seed, "eval-batch", start))
            clean_probs = None
            if bspec.loss_kind == "kl_vs_clean":
                with torch.no_grad():
                    clean_probs = models.forward_probs(params, x)
            x = pgd_attack(params, batch, bspec, clean_probs=clean_probs)
        with torch.no_grad():
            pred = models.forward_logits(params, x).argmax(dim=1)
        correct += int((pred == batch.labels).sum())
    return correct / n


@dataclass(frozen=True)
class AttackSuite:
    entries: tuple  # ((name, PerturbationSpec), ...)

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise EvaluationError("attack suite names must be unique")


def default_suite(epsilon=8.0 / 255.0, norm="linf", seed=0):
    """Desk-scale default: pgd10, pgd_long (100 steps), cw_pgd (40 steps, CW loss)."""
    alpha = 2.0 / 255.0 if norm == "linf" else epsilon / 4.0
    base = PerturbationSpec(norm=norm, epsilon=epsilon, step_size=alpha,
                            random_start=True, seed=seed)
    return AttackSuite(entries=(
        ("pgd10", replace(base, steps=10, loss_kind="ce")),
        ("pgd_long", replace(base, steps=100, loss_kind="ce")),
        ("cw_pgd", replace(base, steps=40, loss_kind="cw")),
    ))


@dataclass(frozen=True)
class ReportRow:
    method: str
    metric: str
    best: float
    final: float

    @property
    def diff(self):
        return self.best - self.final


def run_suite(best_ckpt, final_ckpt, dataset, suite, method=""):
    """Best/final/diff accuracy rows (percent) for natural plus each suite attack.

    Checkpoints may be directories (loaded) or ModelParameters."""
    best = _resolve(best_ckpt)
    final = _resolve(final_ckpt)
    rows = [ReportRow(method=method, metric="natural",
                      best=100.0 * evaluate(best, dataset),
                      final=100.0 * evaluate(final, dataset))]
    for name, spec in suite.entries:
        rows.append(ReportRow(method=method, metric=name,
                              best=100.0 * evaluate(best, dataset, spec),
                              final=100.0 * evaluate(final, dataset, spec)))
    return rows


def _resolve(ckpt):
    if isinstance(ckpt, models.ModelParameters):
        return ckpt
    params, _, _ = models.load_checkpoint(ckpt)
    return params


def render_report(rows):
    """Aligned text table, numbers at 2 decimals, diff = best - final."""
    header = f"{'Method':<16} {'Metric':<10} {'Best':>8} {'Final':>8} {'Diff':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.method:<16} {r.metric:<10} {r.best:>8.2f} {r.final:>8.2f} "
                     f"{r.diff:>8.2f}")
    return "\n".join(lines) + "\n"


def write_report_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "metric", "best", "final", "diff"])
        for r in rows:
            w.writerow([r.method, r.metric, f"{r.best:.2f}", f"{r.final:.2f}",
                        f"{r.diff:.2f}"])


def emit_curves(history, path):
    """Long-format learning-curve data: one row per (epoch, series).

    Series are every history column except epoch; re-emission of the same
    history is byte-identical.
    """
    if not history:
        raise EvaluationError("empty history")
    series = [k for k in history[0].keys() if k != "epoch"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "series", "value"])
        for row in history:
            for s in series:
                v = row.get(s)
                w.writerow([row["epoch"], s, "" if v is None else repr(float(v))])
    return os.path.abspath(path)
