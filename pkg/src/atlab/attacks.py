"""Inner-maximization algorithms: FGSM, PGD under linf/l2, and a brute-force
vertex oracle for linear-softmax models.

PGD iterates in input space with projection after every step. The linf
projection clamps against the tensors x-eps and x+eps, which is the exact
joint projection onto ball and box and makes PGD(steps=1, alpha=eps) bitwise
identical to FGSM. sign(0) = 0, so a zero-gradient model is a fixed point.
"""

from dataclasses import dataclass

import torch

from . import models, objectives
from .rng import derive_seed, generator

L2_FLOOR = 1e-12


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    norm: str = "linf"              # linf | l2
    epsilon: float = 8.0 / 255.0    # input-scale radius
    step_size: float = 2.0 / 255.0
    steps: int = 10
    random_start: bool = True
    loss_kind: str = "ce"           # ce | kl_vs_clean | cw | ce_te
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise AttackError(f"unsupported norm {self.norm!r}")
        if self.epsilon <= 0 or self.step_size <= 0:
            raise AttackError("epsilon and step_size must be > 0")
        if self.steps < 0:
            raise AttackError("steps must be >= 0")
        if self.loss_kind not in objectives.INPUT_LOSS_KINDS:
            raise AttackError(f"unsupported loss kind {self.loss_kind!r}")


def _flat_norms(delta):
    return delta.reshape(delta.shape[0], -1).norm(dim=1)


def _expand(v, like):
    return v.reshape((-1,) + (1,) * (like.dim() - 1))


def project(x_adv, x_clean, spec):
    """Project onto {||x' - x||_p <= eps} intersected with [0,1]^d.

    Ball projection then box clip; for l2 the ball is re-checked once after
    clipping (the clip can only shrink coordinates, so the recheck is a guard).
    Feasible points pass through unchanged.
    """
    if x_adv.shape != x_clean.shape:
        raise AttackError("shape mismatch between x_adv and x_clean")
    eps = spec.epsilon
    if spec.norm == "linf":
        out = torch.minimum(torch.maximum(x_adv, x_clean - eps), x_clean + eps)
        return out.clamp(0.0, 1.0)
    delta = x_adv - x_clean
    norms = _flat_norms(delta)
    scale = (eps / norms.clamp(min=L2_FLOOR)).clamp(max=1.0)
    out = (x_clean + delta * _expand(scale, delta)).clamp(0.0, 1.0)
    # box clipping shrinks coordinates, so this pass should never trigger
    norms = _flat_norms(out - x_clean)
    if bool((norms > eps * (1.0 + 1e-12)).any()):
        delta = out - x_clean
        scale = (eps / norms.clamp(min=L2_FLOOR)).clamp(max=1.0)
        out = (x_clean + delta * _expand(scale, delta)).clamp(0.0, 1.0)
    return out


def _random_start(x, spec):
    g = generator(derive_seed(spec.seed, "attack-start"))
    if spec.norm == "linf":
        delta = (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2.0 - 1.0) * spec.epsilon
    else:
        n = x.shape[0]
        d = x[0].numel()
        direction = torch.randn(x.shape, generator=g, dtype=x.dtype)
        direction = direction / _expand(_flat_norms(direction).clamp(min=L2_FLOOR), direction)
        radius = spec.epsilon * torch.rand(n, generator=g, dtype=x.dtype) ** (1.0 / d)
        delta = direction * _expand(radius, direction)
    return project(x + delta, x, spec)


def pgd_attack(params, batch, spec, clean_probs=None, te_reads=None, te_weight=0.0,
               iterate_hook=None):
    """Multi-step projected gradient ascent on the configured loss.

    linf uses sign steps of size alpha; l2 normalizes the per-sample gradient
    to unit norm. kl_vs_clean requires clean_probs (held constant across all
    steps). Deterministic in spec.seed.
    """
    x = batch.inputs.to(models.DTYPE)
    if spec.loss_kind == "kl_vs_clean":
        if clean_probs is None:
            raise AttackError("kl_vs_clean attack requires clean_probs")
        target = clean_probs
    else:
        target = batch.labels
    if spec.loss_kind == "ce_te" and te_reads is None:
        raise AttackError("ce_te attack requires te_reads")
    x_adv = _random_start(x, spec) if spec.random_start else x.clamp(0.0, 1.0)
    if iterate_hook is not None:
        iterate_hook(0, x_adv)
    for step in range(spec.steps):
        g = objectives.grad_input(spec.loss_kind, params, x_adv, target,
                                  te_reads=te_reads, te_weight=te_weight)
        if spec.norm == "linf":
            direction = g.sign()
        else:
            direction = g / _expand(_flat_norms(g).clamp(min=L2_FLOOR), g)
        x_adv = project(x_adv + spec.step_size * direction, x, spec)
        if iterate_hook is not None:
            iterate_hook(step + 1, x_adv)
    return x_adv.detach()


def fgsm(params, batch, spec):
    """Single sign step of size epsilon on the cross-entropy loss, box-clipped."""
    x = batch.inputs.to(models.DTYPE)
    g = objectives.grad_input("ce", params, x, batch.labels)
    return (x + spec.epsilon * g.sign()).clamp(0.0, 1.0).detach()


def vertex_oracle(params, batch, spec):
    """Exact per-sample max cross-entropy over the linf ball for linear models.

    CE of a linear-softmax model is convex in the input, so the maximum over
    the (box-clipped) eps-cube is attained at one of its 2^d vertices. Returns
    (max losses (B,), maximizing inputs). Only for family=linear, d <= 12.
    """
    if params.arch.family != "linear":
        raise AttackError("vertex_oracle requires a linear-softmax model")
    if spec.norm != "linf":
        raise AttackError("vertex_oracle is defined for the linf threat model")
    d = params.arch.input_dim
    if d > 12:
        raise AttackError(f"vertex_oracle limited to d <= 12, got {d}")
    x = batch.inputs.to(models.DTYPE).reshape(len(batch.labels), -1)
    lo = (x - spec.epsilon).clamp(0.0, 1.0)
    hi = (x + spec.epsilon).clamp(0.0, 1.0)
    # all 2^d bound selections
    masks = torch.zeros((2 ** d, d), dtype=torch.bool)
    for j in range(d):
        masks[:, j] = torch.arange(2 ** d) & (1 << j) != 0
    best_loss = torch.empty(x.shape[0], dtype=models.DTYPE)
    best_x = torch.empty_like(x)
    for i in range(x.shape[0]):
        corners = torch.where(masks, hi[i].expand(2 ** d, d), lo[i].expand(2 ** d, d))
        probs = models.stable_softmax(models.forward_logits(params, corners))
        labels = batch.labels[i].expand(2 ** d)
        losses = objectives.per_sample_cross_entropy(probs, labels)
        k = int(losses.argmax())
        best_loss[i] = losses[k]
        best_x[i] = corners[k]
    return best_loss, best_x.reshape(batch.inputs.shape)
