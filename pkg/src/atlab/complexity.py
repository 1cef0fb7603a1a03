"""Complexity measures over trained models: margin-normalized spectral and l1
norms, dominant input-Hessian eigenvalue, and weight-landscape flatness.

Spectral norms of conv groups are computed for the actual linear operator at
the configured input size (power iteration through the convolution and its
adjoint), not the reshaped-kernel approximation. Hessian-vector products use
central finite differences of analytic gradients (h = 1e-4 at 64-bit).
"""

import csv
import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np
import torch
import torch.nn.functional as F

from . import models, objectives
from .attacks import pgd_attack
from .diagnostics import make_sweep, shift_params
from .rng import derive_seed, generator

HVP_STEP = 1e-4
POWER_TOL = 1e-7
POWER_MAX_ITER = 50_000


class ComplexityError(ValueError):
    pass


@dataclass(frozen=True)
class MarginEstimate:
    value: float
    percentile: float
    sample_count: int
    flagged: bool       # margin <= 0: normalization would invert sign semantics


@dataclass
class CurvatureEstimate:
    mean: float
    stderr: float
    per_sample: list
    converged: bool


@dataclass
class FlatnessEstimate:
    mean: float
    stderr: float
    per_direction: list


@dataclass
class ComplexityReport:
    margin: MarginEstimate
    spectral_complexity: float
    l1_complexity: float
    input_curvature: CurvatureEstimate
    weight_flatness: FlatnessEstimate
    layer_spectral: dict
    layer_l1: dict
    flags: list


# ---------------------------------------------------------------------------
# margins

def margin_percentile(params, dataset, q=10.0):
    """q-th percentile (linear interpolation) of per-sample output margins."""
    if not 0.0 < q < 100.0:
        raise ComplexityError("percentile must be in (0,100)")
    if len(dataset) == 0:
        raise ComplexityError("empty dataset")
    with torch.no_grad():
        logits = models.forward_logits(params, dataset.inputs)
        margins = -objectives.per_sample_cw_margin(logits, dataset.labels)
    value = float(np.percentile(margins.numpy(), q))
    return MarginEstimate(value=value, percentile=q, sample_count=len(dataset),
                          flagged=value <= 0.0)


# ---------------------------------------------------------------------------
# spectral norms

def _power_iterate(apply_b, v, tol, max_iter):
    """Power iteration on a symmetric PSD operator B = A^T A.

    Stops when the Rayleigh residual ||Bv - rho*v|| <= tol*rho, which bounds
    |sigma^2 - rho| by tol*rho (so sigma is accurate to ~tol/2 relative).
    Returns (sigma, converged).
    """
    v = v / v.norm().clamp(min=1e-300)
    rho = 0.0
    for _ in range(max_iter):
        bv = apply_b(v)
        rho = float((v * bv).sum())
        residual = (bv - rho * v).norm().item()
        if residual <= tol * max(rho, 1e-300):
            return math.sqrt(max(rho, 0.0)), True
        nv = bv.norm()
        if nv == 0.0:
            return 0.0, True
        v = bv / nv
    return math.sqrt(max(rho, 0.0)), False


def _dense_spectral(w, tol, max_iter, g):
    v = torch.randn(w.shape[1], generator=g, dtype=models.DTYPE)
    return _power_iterate(lambda x: w.t() @ (w @ x), v, tol, max_iter)


def _conv_apply(x, w, stride, padding):
    return F.conv2d(x, w, stride=stride, padding=padding)


def _conv_adjoint(y, w, stride, padding, in_hw):
    h_out = (in_hw[0] + 2 * padding - w.shape[2]) // stride + 1
    out_pad_h = in_hw[0] - ((h_out - 1) * stride - 2 * padding + w.shape[2])
    w_out = (in_hw[1] + 2 * padding - w.shape[3]) // stride + 1
    out_pad_w = in_hw[1] - ((w_out - 1) * stride - 2 * padding + w.shape[3])
    return F.conv_transpose2d(y, w, stride=stride, padding=padding,
                              output_padding=(out_pad_h, out_pad_w))


def _conv_spectral(w, geometry, tol, max_iter, g):
    in_c = w.shape[1]
    hw = (geometry["height"], geometry["width"])
    stride, padding = geometry["stride"], geometry["padding"]
    v = torch.randn(1, in_c, hw[0], hw[1], generator=g, dtype=models.DTYPE)

    def apply_b(x):
        return _conv_adjoint(_conv_apply(x, w, stride, padding), w, stride, padding, hw)

    return _power_iterate(apply_b, v, tol, max_iter)


def layer_spectral_norm(array, geometry=None, tol=POWER_TOL, max_iter=POWER_MAX_ITER, seed=0):
    """Largest singular value of a dense matrix or conv operator.

    Conv weights (4-D) need a geometry dict {height, width, stride, padding}
    describing the operator's input. Returns (sigma, converged).
    """
    g = generator(derive_seed(seed, "spectral", tuple(array.shape)))
    if array.dim() == 2:
        return _dense_spectral(array.to(models.DTYPE), tol, max_iter, g)
    if array.dim() == 4:
        if geometry is None:
            raise ComplexityError("conv spectral norm needs operator geometry")
        return _conv_spectral(array.to(models.DTYPE), geometry, tol, max_iter, g)
    raise ComplexityError("spectral norm defined for dense (2-D) or conv (4-D) groups")


def densify_conv_operator(w, geometry):
    """Explicit matrix of the conv operator (columns = responses to basis inputs)."""
    in_c = w.shape[1]
    h, wd = geometry["height"], geometry["width"]
    dim = in_c * h * wd
    basis = torch.eye(dim, dtype=models.DTYPE).reshape(dim, in_c, h, wd)
    out = _conv_apply(basis, w, geometry["stride"], geometry["padding"])
    return out.reshape(dim, -1).t()


def _weight_groups(params):
    return [g for g in params.groups if g.role in (models.ROLE_CONV, models.ROLE_DENSE)]


def layer_norms(params, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Per weight group: spectral norm (operator-level for convs) and entrywise l1."""
    geo = models.conv_geometry(params)
    spectral, l1, flags = {}, {}, []
    for g in _weight_groups(params):
        sigma, ok = layer_spectral_norm(g.array, geo.get(g.name), tol, max_iter)
        spectral[g.name] = sigma
        l1[g.name] = g.array.abs().sum().item()
        if not ok:
            flags.append(f"power iteration did not converge: {g.name}")
    return spectral, l1, flags


def spectral_complexity(params, margin, layer_spectral=None):
    """(prod_i ||W_i||_2) / margin over weight groups; nan on margin <= 0."""
    if margin <= 0.0:
        return float("nan")
    if layer_spectral is None:
        layer_spectral = layer_norms(params)[0]
    prod = 1.0
    for v in layer_spectral.values():
        prod *= v
    return prod / margin


def l1_complexity(params, margin, layer_l1=None):
    """(sum_i ||W_i||_1) / margin over weight groups; nan on margin <= 0."""
    if margin <= 0.0:
        return float("nan")
    if layer_l1 is None:
        layer_l1 = {g.name: g.array.abs().sum().item() for g in _weight_groups(params)}
    return sum(layer_l1.values()) / margin


# ---------------------------------------------------------------------------
# input-loss curvature

def dominant_input_eigenvalue(grad_fn, x0, h=HVP_STEP, tol=1e-8, max_iter=200, v0=None):
    """Largest-magnitude eigenvalue of the Hessian behind grad_fn at x0.

    grad_fn(x) -> gradient tensor; Hv is approximated by central differences
    (grad_fn(x+hv) - grad_fn(x-hv)) / 2h. Returns (eigenvalue, converged).
    """
    v = v0.clone() if v0 is not None else torch.ones_like(x0)
    v = v / v.norm().clamp(min=1e-30)
    eig = 0.0
    for _ in range(max_iter):
        hv = (grad_fn(x0 + h * v) - grad_fn(x0 - h * v)) / (2.0 * h)
        new_eig = float((v * hv).sum())
        nv = hv.norm()
        if nv == 0.0:
            return 0.0, True
        v = hv / nv
        if abs(new_eig - eig) <= tol * max(abs(new_eig), 1e-30):
            return new_eig, True
        eig = new_eig
    return eig, False


def input_curvature(params, batch, h=HVP_STEP, tol=1e-8, max_iter=200, seed=0):
    """Batch mean of the per-sample dominant eigenvalue of the input CE Hessian."""
    x = batch.inputs.to(models.DTYPE)
    g0 = generator(derive_seed(seed, "curvature", tuple(x.shape[1:])))
    v0 = torch.randn(x.shape[1:], generator=g0, dtype=models.DTYPE)
    values, all_ok = [], True
    for i in range(x.shape[0]):
        label = batch.labels[i:i + 1]

        def grad_fn(xi):
            return objectives.grad_input("ce", params, xi.unsqueeze(0), label)[0]

        eig, ok = dominant_input_eigenvalue(grad_fn, x[i], h, tol, max_iter, v0)
        values.append(eig)
        all_ok = all_ok and ok
    arr = np.asarray(values)
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return CurvatureEstimate(mean=float(arr.mean()), stderr=stderr,
                             per_sample=values, converged=all_ok)


# ---------------------------------------------------------------------------
# weight-landscape flatness

def _adv_loss(params, batch, spec):
    adv = pgd_attack(params, batch, dc_replace(spec, loss_kind="ce"))
    with torch.no_grad():
        probs = models.forward_probs(params, adv)
        return objectives.cross_entropy(probs, batch.labels).item()


def weight_flatness(params, dataset, spec, direction_seeds, lambda_grid):
    """Mean |J(theta + lambda d) - J(theta)| over filter-normalized random
    directions and the lambda grid, with adversarial examples regenerated at
    each shifted point (fixed attack seed)."""
    if len(direction_seeds) < 1:
        raise ComplexityError("need at least one direction seed")
    from .data import full_batch
    batch = full_batch(dataset)
    base = _adv_loss(params, batch, spec)
    per_direction = []
    for ds in direction_seeds:
        sweep = make_sweep(params, lambda_grid, ds)
        diffs = []
        for lam in lambda_grid:
            if lam == 0.0:
                diffs.append(0.0)
                continue
            shifted = shift_params(params, sweep.direction, lam)
            diffs.append(abs(_adv_loss(shifted, batch, spec) - base))
        per_direction.append(float(np.mean(diffs)))
    arr = np.asarray(per_direction)
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return FlatnessEstimate(mean=float(arr.mean()), stderr=stderr,
                            per_direction=per_direction)


# ---------------------------------------------------------------------------
# report assembly

def complexity_report(params, dataset, spec, q=10.0, curvature_samples=32,
                      direction_seeds=(0, 1, 2, 3), lambda_grid=(-0.05, -0.025, 0.025, 0.05)):
    """Full complexity report on a snapshot: margins, norm measures, curvature,
    flatness, and per-layer norms."""
    from .data import full_batch, subset
    margin = margin_percentile(params, dataset, q)
    layer_spectral, layer_l1, flags = layer_norms(params)
    if margin.flagged:
        flags.append("non-positive margin: norm complexities undefined")
    curv_ds = subset(dataset, min(curvature_samples, len(dataset)))
    curvature = input_curvature(params, full_batch(curv_ds))
    if not curvature.converged:
        flags.append("input curvature power iteration did not converge")
    flatness = weight_flatness(params, curv_ds, spec, direction_seeds, lambda_grid)
    return ComplexityReport(
        margin=margin,
        spectral_complexity=spectral_complexity(params, margin.value, layer_spectral),
        l1_complexity=l1_complexity(params, margin.value, layer_l1),
        input_curvature=curvature,
        weight_flatness=flatness,
        layer_spectral=layer_spectral,
        layer_l1=layer_l1,
        flags=flags,
    )


def write_complexity_csv(report, path, run_id=""):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "margin", "spectral_complexity", "l1_complexity",
                    "input_curvature", "input_curvature_stderr",
                    "weight_flatness", "weight_flatness_stderr", "flags"])
        w.writerow([run_id, report.margin.value, report.spectral_complexity,
                    report.l1_complexity, report.input_curvature.mean,
                    report.input_curvature.stderr, report.weight_flatness.mean,
                    report.weight_flatness.stderr, ";".join(report.flags)])
