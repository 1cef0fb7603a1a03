"""Training objectives: cross-entropy, KL, CW margin, temporal-ensembling penalty,
and the composite losses assembled from them, with gradients w.r.t. parameters
and inputs.

Convention: parameter gradients treat adversarial inputs as constants (the
outer step of robust optimization differentiates only through the loss at the
attack point, not through the attack). All reductions are per-batch means.
"""

from dataclasses import dataclass

import torch

from . import models
from .schedules import Schedule, schedule_value

LOG_FLOOR = 1e-12

KINDS = ("standard_ce", "pgd_at", "trades", "interpolated", "pgd_at_te", "trades_te")
TE_KINDS = ("pgd_at_te", "trades_te")
TRADES_KINDS = ("trades", "trades_te")

GRAD_TERMS = ("total", "clean_ce", "adv_ce", "kl", "te", "residual")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "pgd_at"
    beta: float = 6.0                     # TRADES balance
    gamma_schedule: Schedule = Schedule(kind="constant", base=1.0)
    te_weight: float = 30.0
    te_momentum: float = 0.9
    ramp: Schedule = Schedule(kind="constant", base=1.0)
    label_smoothing: float = 0.0
    attack_ascends_te: bool = False       # let the inner max also ascend the TE term

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective kind {self.kind!r}")
        if self.beta < 0 or self.te_weight < 0:
            raise ObjectiveError("beta and te_weight must be >= 0")
        if not 0.0 <= self.te_momentum < 1.0:
            raise ObjectiveError("te_momentum must be in [0,1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ObjectiveError("label_smoothing must be in [0,1)")

    def gamma(self, epoch):
        return schedule_value(self.gamma_schedule, epoch)

    def te_weight_at(self, epoch):
        return self.te_weight * schedule_value(self.ramp, epoch)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    clean_ce: float
    adv_ce: float
    kl_term: float      # beta-weighted, as it enters the objective
    te_term: float      # w(epoch)-weighted
    residual: float     # adv_ce - clean_ce
    gamma: float = 1.0
    te_weight: float = 0.0


# ---------------------------------------------------------------------------
# scalar losses (batch means; tensor-in tensor-out so graphs survive)

def per_sample_cross_entropy(probs, labels, smoothing=0.0):
    if probs.shape[0] != labels.shape[0]:
        raise ObjectiveError("probs/labels batch mismatch")
    C = probs.shape[1]
    logp = torch.log(probs.clamp(min=LOG_FLOOR))
    true_logp = logp.gather(1, labels.view(-1, 1)).squeeze(1)
    if smoothing == 0.0:
        return -true_logp
    return -((1.0 - smoothing) * true_logp + (smoothing / C) * logp.sum(dim=1))


def cross_entropy(probs, labels, smoothing=0.0):
    """Mean smoothed cross-entropy of probability rows against integer labels."""
    if not 0.0 <= smoothing < 1.0:
        raise ObjectiveError("smoothing must be in [0,1)")
    return per_sample_cross_entropy(probs, labels, smoothing).mean()


def per_sample_kl(p, q):
    if p.shape != q.shape:
        raise ObjectiveError("KL arguments must have matching shapes")
    return (torch.xlogy(p, p) - torch.xlogy(p, q.clamp(min=LOG_FLOOR))).sum(dim=1)


def kl_divergence(p, q):
    """Mean KL(p || q) over probability rows, with 0 log 0 = 0 and clamped q."""
    return per_sample_kl(p, q).mean()


def per_sample_cw_margin(logits, labels):
    if logits.shape[1] < 2:
        raise ObjectiveError("CW margin needs at least two classes")
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    onehot = torch.zeros_like(logits, dtype=torch.bool)
    onehot.scatter_(1, labels.view(-1, 1), True)
    other = logits.masked_fill(onehot, float("-inf")).max(dim=1).values
    return other - true


def cw_margin_loss(logits, labels):
    """Mean CW margin (max other logit minus true logit); the attacker ascends this."""
    return per_sample_cw_margin(logits, labels).mean()


def per_sample_te(adv_probs, reads):
    if adv_probs.shape != reads.shape:
        raise ObjectiveError("TE arguments must have matching shapes")
    return ((adv_probs - reads) ** 2).sum(dim=1)


def te_regularizer(adv_probs, ensemble_reads):
    """Mean squared l2 distance between adversarial predictions and ensemble reads."""
    return per_sample_te(adv_probs, ensemble_reads).mean()


# ---------------------------------------------------------------------------
# composite objectives

def _composite_terms(config, params, batch, adv_inputs, ensemble_reads, epoch, train_mode=False):
    if config.kind in TE_KINDS and ensemble_reads is None:
        raise ObjectiveError(f"{config.kind} requires ensemble_reads")
    s = config.label_smoothing
    clean_probs = models.stable_softmax(models.forward_logits(params, batch.inputs, train_mode))
    if adv_inputs is None:
        adv_probs = models.stable_softmax(models.forward_logits(params, batch.inputs, train_mode))
    else:
        adv_probs = models.stable_softmax(models.forward_logits(params, adv_inputs, train_mode))
    clean_ce = cross_entropy(clean_probs, batch.labels, s)
    adv_ce = cross_entropy(adv_probs, batch.labels, s)
    gamma = config.gamma(epoch)
    w = config.te_weight_at(epoch)
    zero = torch.zeros((), dtype=clean_ce.dtype)
    kl = config.beta * kl_divergence(clean_probs, adv_probs) if config.kind in TRADES_KINDS else zero
    te = w * te_regularizer(adv_probs, ensemble_reads) if config.kind in TE_KINDS else zero
    if config.kind == "standard_ce":
        total = clean_ce
    elif config.kind == "pgd_at":
        total = adv_ce
    elif config.kind == "trades":
        total = clean_ce + kl
    elif config.kind == "interpolated":
        total = (1.0 - gamma) * clean_ce + gamma * adv_ce
    elif config.kind == "pgd_at_te":
        total = adv_ce + te
    else:  # trades_te
        total = clean_ce + kl + te
    return {"total": total, "clean_ce": clean_ce, "adv_ce": adv_ce, "kl": kl, "te": te,
            "residual": adv_ce - clean_ce, "gamma": gamma, "te_weight": w}


def _breakdown(terms):
    return LossBreakdown(
        total=terms["total"].item(), clean_ce=terms["clean_ce"].item(),
        adv_ce=terms["adv_ce"].item(), kl_term=terms["kl"].item(),
        te_term=terms["te"].item(), residual=terms["residual"].item(),
        gamma=terms["gamma"], te_weight=terms["te_weight"])


def composite_loss(config, params, batch, adv_inputs, ensemble_reads=None, epoch=0,
                   train_mode=False):
    """LossBreakdown of the configured objective at one batch.

    adv_inputs=None is treated as a zero-perturbation attack (adv terms equal
    the clean ones), which is how standard_ce runs use this path.
    """
    terms = _composite_terms(config, params, batch, adv_inputs, ensemble_reads, epoch, train_mode)
    return _breakdown(terms)


def grad_params(config, params, batch, adv_inputs, ensemble_reads=None, epoch=0,
                terms=("total",), train_mode=False):
    """Flattened parameter gradients of the requested terms, plus the breakdown.

    Adversarial inputs are held fixed; gradients flow only through the loss
    evaluation. Returns ({term: flat grad vector}, LossBreakdown).
    """
    for t in terms:
        if t not in GRAD_TERMS:
            raise ObjectiveError(f"unknown gradient term {t!r}")
    p = models.params_with_grad(params)
    tensors = p.tensors()
    term_map = _composite_terms(config, p, batch, adv_inputs, ensemble_reads, epoch, train_mode)
    grads = {}
    for t in terms:
        value = term_map[t]
        if value.grad_fn is None:
            grads[t] = torch.zeros(sum(x.numel() for x in tensors), dtype=value.dtype)
            continue
        parts = torch.autograd.grad(value, tensors, retain_graph=True, allow_unused=True)
        flat = [torch.zeros_like(x).reshape(-1) if g is None else g.reshape(-1)
                for x, g in zip(tensors, parts)]
        grads[t] = torch.cat(flat)
    return grads, _breakdown(term_map)


# ---------------------------------------------------------------------------
# input gradients (attack side)

INPUT_LOSS_KINDS = ("ce", "kl_vs_clean", "cw", "ce_te")


def _attack_objective(loss_kind, params, x, labels_or_clean_probs, te_reads, te_weight):
    if loss_kind == "ce":
        probs = models.stable_softmax(models.forward_logits(params, x))
        return per_sample_cross_entropy(probs, labels_or_clean_probs)
    if loss_kind == "kl_vs_clean":
        probs = models.stable_softmax(models.forward_logits(params, x))
        return per_sample_kl(labels_or_clean_probs.detach(), probs)
    if loss_kind == "cw":
        return per_sample_cw_margin(models.forward_logits(params, x), labels_or_clean_probs)
    if loss_kind == "ce_te":
        probs = models.stable_softmax(models.forward_logits(params, x))
        ce = per_sample_cross_entropy(probs, labels_or_clean_probs)
        return ce + te_weight * per_sample_te(probs, te_reads.detach())
    raise ObjectiveError(f"unknown loss kind {loss_kind!r}")


def attack_loss_values(loss_kind, params, inputs, labels_or_clean_probs,
                       te_reads=None, te_weight=0.0):
    """Per-sample attack loss values (no gradient)."""
    with torch.no_grad():
        return _attack_objective(loss_kind, params, inputs.to(models.DTYPE),
                                 labels_or_clean_probs, te_reads, te_weight)


def grad_input(loss_kind, params, inputs, labels_or_clean_probs,
               te_reads=None, te_weight=0.0):
    """Per-sample gradient of the chosen attack loss w.r.t. the inputs.

    For kl_vs_clean the reference clean probabilities are constants. Forward
    passes run in eval mode: attacks see a frozen snapshot.
    """
    x = inputs.to(models.DTYPE).detach().clone().requires_grad_(True)
    losses = _attack_objective(loss_kind, params, x, labels_or_clean_probs, te_reads, te_weight)
    grad, = torch.autograd.grad(losses.sum(), x)
    return grad
