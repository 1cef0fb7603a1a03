"""Analysis instruments for adversarial training runs: per-term gradient norms
and ratios, direction-sweep gradient stability, cross-epoch gradient cosine,
an empirical probe of the adversarial-gradient stability bound, per-sample
adversarial losses, and Kendall's rank coefficient.

All probes are read-only on parameter snapshots. Attack seeds are held fixed
across a sweep so gradient differences reflect parameter movement, not attack
randomness.
"""

import csv
import math
from dataclasses import dataclass, replace

import torch

from . import models, objectives
from .attacks import pgd_attack, project, vertex_oracle
from .data import ExampleBatch
from .rng import derive_seed, generator

SWEEP_LOSS_KINDS = ("pgd_at", "trades", "clean_ce")


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-sample parameter gradients

def _per_sample_losses(kind, params, batch, adv_inputs, beta):
    clean_probs = models.stable_softmax(models.forward_logits(params, batch.inputs))
    if kind == "clean_ce":
        return objectives.per_sample_cross_entropy(clean_probs, batch.labels)
    adv_probs = models.stable_softmax(models.forward_logits(params, adv_inputs))
    if kind == "pgd_at":
        return objectives.per_sample_cross_entropy(adv_probs, batch.labels)
    if kind == "trades":
        return (objectives.per_sample_cross_entropy(clean_probs, batch.labels)
                + beta * objectives.per_sample_kl(clean_probs, adv_probs))
    raise DiagnosticsError(f"unknown sweep loss kind {kind!r}")


def per_sample_param_grads(kind, params, batch, adv_inputs=None, beta=6.0):
    """(B, P) matrix of per-sample parameter gradients of the chosen loss."""
    p = models.params_with_grad(params)
    tensors = p.tensors()
    losses = _per_sample_losses(kind, p, batch, adv_inputs, beta)
    rows = []
    for i in range(losses.shape[0]):
        parts = torch.autograd.grad(losses[i], tensors,
                                    retain_graph=i + 1 < losses.shape[0], allow_unused=True)
        rows.append(torch.cat([torch.zeros_like(t).reshape(-1) if g is None else g.reshape(-1)
                               for t, g in zip(tensors, parts)]))
    return torch.stack(rows), losses.detach()


def _ce_param_grads(params, inputs, labels):
    batch = ExampleBatch(inputs=inputs, labels=labels,
                         sample_ids=torch.arange(labels.shape[0]))
    return per_sample_param_grads("clean_ce", params, batch, None)[0]


# ---------------------------------------------------------------------------
# gradient magnitude (batch-mean losses)

def grad_norm_terms(params, batch, method, spec, beta=6.0):
    """l2 norms of the per-term parameter gradients, with fresh attacks.

    pgd_at: norms of clean CE, the adversarial loss J, and the residual
    R = J - clean CE. trades: norms of clean CE and the beta-weighted KL term.
    """
    if method not in ("pgd_at", "trades"):
        raise DiagnosticsError(f"unknown method {method!r}")
    if method == "pgd_at":
        adv = pgd_attack(params, batch, replace_kind(spec, "ce"))
    else:
        with torch.no_grad():
            clean_ref = models.forward_probs(params, batch.inputs)
        adv = pgd_attack(params, batch, replace_kind(spec, "kl_vs_clean"), clean_probs=clean_ref)
    p = models.params_with_grad(params)
    tensors = p.tensors()
    clean_probs = models.stable_softmax(models.forward_logits(p, batch.inputs))
    adv_probs = models.stable_softmax(models.forward_logits(p, adv))
    clean_ce = objectives.cross_entropy(clean_probs, batch.labels)

    def norm_of(value):
        if value.grad_fn is None:
            return 0.0
        parts = torch.autograd.grad(value, tensors, retain_graph=True, allow_unused=True)
        total = 0.0
        for t, g in zip(tensors, parts):
            if g is not None:
                total += float((g ** 2).sum())
        return math.sqrt(total)

    out = {"method": method, "norm_clean_ce": norm_of(clean_ce),
           "norm_adv": None, "norm_kl": None, "norm_residual": None}
    if method == "pgd_at":
        adv_ce = objectives.cross_entropy(adv_probs, batch.labels)
        out["norm_adv"] = norm_of(adv_ce)
        out["norm_residual"] = norm_of(adv_ce - clean_ce)
        num = out["norm_residual"]
    else:
        kl = beta * objectives.kl_divergence(clean_probs, adv_probs)
        out["norm_kl"] = norm_of(kl)
        num = out["norm_kl"]
    out["ratio"] = num / out["norm_clean_ce"] if out["norm_clean_ce"] > 1e-12 else float("nan")
    return out


def grad_ratio(params, batch, method, spec, beta=6.0):
    """Relative gradient magnitude: ||grad R|| / ||grad clean CE|| for pgd_at,
    ||grad beta*KL|| / ||grad clean CE|| for trades. nan when the denominator
    vanishes."""
    return grad_norm_terms(params, batch, method, spec, beta)["ratio"]


def replace_kind(spec, loss_kind):
    return replace(spec, loss_kind=loss_kind)


# ---------------------------------------------------------------------------
# direction sweeps

@dataclass(frozen=True)
class DirectionSweep:
    direction: tuple      # tensors aligned with parameter groups
    lambdas: tuple
    seed: int


@dataclass
class SweepRecord:
    loss_kind: str
    lambdas: tuple
    l2_dist: list
    cosine: list
    loss: list


def normalize_direction(params, raw):
    """Filter normalization: rescale each group so ||d_g|| = ||theta_g||."""
    out = []
    for g, d in zip(params.groups, raw):
        tn, dn = g.array.norm().item(), d.norm().item()
        if tn == 0.0 or dn == 0.0:
            out.append(torch.zeros_like(g.array))
        else:
            out.append(d * (tn / dn))
    return tuple(out)


def make_sweep(params, lambdas, seed):
    """Gaussian direction, filter-normalized per group."""
    g = generator(derive_seed(seed, "sweep-direction"))
    raw = [torch.randn(p.array.shape, generator=g, dtype=models.DTYPE) for p in params.groups]
    return DirectionSweep(direction=normalize_direction(params, raw),
                          lambdas=tuple(lambdas), seed=seed)


def shift_params(params, direction, lam):
    groups = tuple(models.ParamGroup(g.name, (g.array + lam * d).detach(), g.role)
                   for g, d in zip(params.groups, direction))
    return models.ModelParameters(groups=groups, buffers=params.buffers, arch=params.arch)


def _sweep_grads(kind, params, batch, spec, beta):
    if kind == "clean_ce":
        return per_sample_param_grads(kind, params, batch, None, beta)
    if kind == "pgd_at":
        adv = pgd_attack(params, batch, replace_kind(spec, "ce"))
    else:
        with torch.no_grad():
            clean_ref = models.forward_probs(params, batch.inputs)
        adv = pgd_attack(params, batch, replace_kind(spec, "kl_vs_clean"), clean_probs=clean_ref)
    return per_sample_param_grads(kind, params, batch, adv, beta)


def direction_sweep(params, batch, sweep, loss_kinds, spec, beta=6.0):
    """Gradient change along theta + lambda*d for each loss kind.

    Adversarial examples are regenerated at each shifted point with the same
    attack seed; distances and cosines are per-sample, averaged over the batch.
    Returns {loss_kind: SweepRecord}.
    """
    for kind in loss_kinds:
        if kind not in SWEEP_LOSS_KINDS:
            raise DiagnosticsError(f"unknown sweep loss kind {kind!r}")
    base = {kind: _sweep_grads(kind, params, batch, spec, beta) for kind in loss_kinds}
    records = {kind: SweepRecord(kind, sweep.lambdas, [], [], []) for kind in loss_kinds}
    for lam in sweep.lambdas:
        shifted = params if lam == 0.0 else shift_params(params, sweep.direction, lam)
        for kind in loss_kinds:
            grads, losses = (base[kind] if lam == 0.0
                             else _sweep_grads(kind, shifted, batch, spec, beta))
            ref = base[kind][0]
            dist = (grads - ref).norm(dim=1).mean().item()
            denom = grads.norm(dim=1) * ref.norm(dim=1)
            cos = ((grads * ref).sum(dim=1) / denom.clamp(min=1e-300)).mean().item()
            rec = records[kind]
            rec.l2_dist.append(dist)
            rec.cosine.append(cos)
            rec.loss.append(losses.mean().item())
    return records


def epoch_gradient_cosine(grad_a, grad_b):
    """Cosine similarity of two flattened gradients; nan if either is zero."""
    if grad_a.shape != grad_b.shape:
        raise DiagnosticsError("gradient length mismatch")
    na, nb = grad_a.norm().item(), grad_b.norm().item()
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float((grad_a * grad_b).sum().item() / (na * nb))


# ---------------------------------------------------------------------------
# Lipschitz estimation and the gradient-stability bound probe

@dataclass(frozen=True)
class LipschitzEstimate:
    k_hat: float          # max observed ratio: a lower bound on the true K
    sample_count: int
    spec: object


def _input_distance(delta, norm):
    flat = delta.reshape(delta.shape[0], -1)
    return flat.abs().max(dim=1).values if norm == "linf" else flat.norm(dim=1)


def lipschitz_over_points(params_list, batch, points_list, norm):
    """Max gradient-difference / input-distance ratio over explicit candidate points.

    points_list holds (B, ...) tensors of perturbed inputs; ratios are taken
    against the clean batch for every params in params_list.
    """
    best = 0.0
    for params in params_list:
        g_clean = _ce_param_grads(params, batch.inputs, batch.labels)
        for pts in points_list:
            g_pert = _ce_param_grads(params, pts, batch.labels)
            num = (g_pert - g_clean).norm(dim=1)
            den = _input_distance(pts.to(models.DTYPE) - batch.inputs.to(models.DTYPE), norm)
            ratios = num / den.clamp(min=1e-12)
            best = max(best, ratios.max().item())
    return best


def estimate_lipschitz(params, batch, spec, sample_count, seed):
    """K-hat = max gradient-difference ratio over seeded uniform ball samples
    plus the PGD endpoints (which empirically dominate). Nested in seed: a
    larger sample_count extends the candidate set, so K-hat never decreases.
    """
    if sample_count < 1:
        raise DiagnosticsError("sample_count must be >= 1")
    x = batch.inputs.to(models.DTYPE)
    points = []
    for j in range(sample_count):
        g = generator(derive_seed(seed, "lipschitz", j))
        if spec.norm == "linf":
            delta = (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * spec.epsilon
        else:
            delta = torch.randn(x.shape, generator=g, dtype=x.dtype)
            flat = delta.reshape(delta.shape[0], -1)
            d = flat.shape[1]
            radius = spec.epsilon * torch.rand(x.shape[0], generator=g, dtype=x.dtype) ** (1.0 / d)
            delta = delta * (radius / flat.norm(dim=1).clamp(min=1e-12)).reshape(
                (-1,) + (1,) * (x.dim() - 1))
        points.append(project(x + delta, x, spec))
    points.append(pgd_attack(params, batch, replace_kind(spec, "ce")))
    k_hat = lipschitz_over_points([params], batch, points, spec.norm)
    return LipschitzEstimate(k_hat=k_hat, sample_count=sample_count, spec=spec)


@dataclass
class Theorem1Report:
    lhs: list
    rhs: list
    margins: list          # rhs - lhs; negative = violated
    violated: list
    violation_rate: float
    k_hat: float
    note: str = ("k_hat lower-bounds the true Lipschitz constant; a violation "
                 "indicts the estimate, not the bound")


def theorem1_probe(params_1, params_2, batch, spec, k_hat, inner="pgd"):
    """Per-sample check of the adversarial-gradient stability bound:

        ||gJ(th1) - gJ(th2)|| <= ||gL(th1) - gL(th2)|| + 2*eps*K

    where gJ is the CE gradient at the inner maximizer and gL at the clean
    point. inner="vertex" uses the exact linear-softmax oracle.
    """
    x = batch.inputs.to(models.DTYPE)
    gj, gl = [], []
    for params in (params_1, params_2):
        if inner == "vertex":
            _, adv = vertex_oracle(params, batch, spec)
        else:
            adv = pgd_attack(params, batch, replace_kind(spec, "ce"))
        gj.append(_ce_param_grads(params, adv, batch.labels))
        gl.append(_ce_param_grads(params, x, batch.labels))
    lhs = (gj[0] - gj[1]).norm(dim=1)
    rhs = (gl[0] - gl[1]).norm(dim=1) + 2.0 * spec.epsilon * k_hat
    margins = rhs - lhs
    violated = margins < -1e-9
    return Theorem1Report(lhs=lhs.tolist(), rhs=rhs.tolist(), margins=margins.tolist(),
                          violated=violated.tolist(),
                          violation_rate=float(violated.to(torch.float64).mean()),
                          k_hat=float(k_hat))


# ---------------------------------------------------------------------------
# per-sample adversarial loss and rank consistency

def per_sample_adv_loss(params, dataset, spec, batch_size=256):
    """Per-sample max-CE estimate via the configured PGD, indexed by sample_id.

    With random_start=False the attack is a deterministic ascent from each
    clean point, making the result independent of batch composition and
    permutation-equivariant in dataset order.
    """
    n = len(dataset)
    out = torch.empty(n, dtype=models.DTYPE)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        batch = ExampleBatch(inputs=dataset.inputs[sl], labels=dataset.labels[sl],
                             sample_ids=dataset.sample_ids[sl])
        bspec = replace(spec, loss_kind="ce", seed=derive_seed(spec.seed, "psl", start))
        adv = pgd_attack(params, batch, bspec)
        with torch.no_grad():
            probs = models.forward_probs(params, adv)
            out[sl] = objectives.per_sample_cross_entropy(probs, batch.labels)
    return out


def _merge_count(values):
    """Number of inversion exchanges needed to sort `values` (equal keys not counted)."""
    a = list(values)
    tmp = [0.0] * len(a)
    swaps = 0

    def sort(lo, hi):
        nonlocal swaps
        if hi - lo <= 1:
            return
        mid = (lo + hi) // 2
        sort(lo, mid)
        sort(mid, hi)
        i, j, k = lo, mid, lo
        while i < mid and j < hi:
            if a[j] < a[i]:
                tmp[k] = a[j]
                swaps += mid - i
                j += 1
            else:
                tmp[k] = a[i]
                i += 1
            k += 1
        while i < mid:
            tmp[k] = a[i]
            i += 1
            k += 1
        while j < hi:
            tmp[k] = a[j]
            j += 1
            k += 1
        a[lo:hi] = tmp[lo:hi]

    sort(0, len(a))
    return swaps


def _tie_count(sorted_keys):
    total, run = 0, 1
    for i in range(1, len(sorted_keys)):
        if sorted_keys[i] == sorted_keys[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def kendall_tau(a, b):
    """Tie-corrected Kendall tau-b via O(n log n) merge counting.

    nan when either vector is all-constant (denominator undefined).
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n = len(a)
    if len(b) != n:
        raise DiagnosticsError("kendall_tau needs equal-length vectors")
    if n < 2:
        raise DiagnosticsError("kendall_tau needs length >= 2")
    order = sorted(range(n), key=lambda i: (a[i], b[i]))
    a_sorted = [a[i] for i in order]
    b_sorted = [b[i] for i in order]
    n0 = n * (n - 1) // 2
    n1 = _tie_count(a_sorted)
    n2 = _tie_count(sorted(b))
    n3 = _tie_count(sorted(zip(a_sorted, b_sorted)))
    swaps = _merge_count(b_sorted)
    if n0 == n1 or n0 == n2:
        return float("nan")
    numerator = n0 - n1 - n2 + n3 - 2 * swaps
    return numerator / math.sqrt((n0 - n1) * (n0 - n2))


# ---------------------------------------------------------------------------
# CSV emission

def write_grad_norms_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "method", "norm_clean_ce", "norm_adv", "norm_kl",
                    "norm_residual", "ratio"])
        for r in rows:
            w.writerow([r.get("epoch", ""), r["method"], r["norm_clean_ce"],
                        _blank(r["norm_adv"]), _blank(r["norm_kl"]),
                        _blank(r["norm_residual"]), r["ratio"]])


def write_sweep_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["loss_kind", "lambda", "l2_dist", "cosine", "loss"])
        for rec in records.values():
            for lam, d, c, lo in zip(rec.lambdas, rec.l2_dist, rec.cosine, rec.loss):
                w.writerow([rec.loss_kind, lam, d, c, lo])


def write_theorem1_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair_id", "lhs", "rhs", "violated"])
        for i, (l, r, v) in enumerate(zip(report.lhs, report.rhs, report.violated)):
            w.writerow([i, l, r, int(v)])


def write_sample_losses_csv(losses, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "adv_loss"])
        for i, v in enumerate(losses.tolist()):
            w.writerow([i, v])


def write_tau(value, path):
    with open(path, "w") as f:
        f.write(f"{value}\n")


def _blank(v):
    return "" if v is None else v
