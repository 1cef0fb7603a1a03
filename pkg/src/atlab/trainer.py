"""Training loop for the robust objectives, with schedules, SGD momentum,
temporal-ensembling buffer, and best/final checkpoint tracking.

All randomness (shuffling, augmentation, attack starts, evaluation attacks)
derives from the single run seed via tagged sub-seeds, so identical configs
reproduce bitwise. The trainer is the only writer of parameters, optimizer
state and the ensemble buffer; attacks and hooks see immutable snapshots.
"""

import csv
import math
import os
from dataclasses import dataclass, replace

import torch

from . import data as data_mod
from . import evaluation, models, objectives
from .attacks import PerturbationSpec, pgd_attack
from .rng import derive_seed
from .schedules import Schedule, schedule_value  # noqa: F401  (re-exported)

HISTORY_COLUMNS = (
    "epoch", "lr", "train_nat_acc", "train_rob_acc", "test_nat_acc", "test_rob_acc",
    "loss_total", "loss_clean_ce", "loss_adv_ce", "loss_kl", "loss_te",
    "gamma", "te_weight",
)


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class OptimizerState:
    momentum: float
    weight_decay: float
    buffers: tuple  # tensors mirroring parameter group shapes

    @classmethod
    def init(cls, params, momentum=0.9, weight_decay=5e-4):
        bufs = tuple(torch.zeros_like(g.array) for g in params.groups)
        return cls(momentum=momentum, weight_decay=weight_decay, buffers=bufs)

    @classmethod
    def from_payload(cls, payload):
        return cls(momentum=float(payload["momentum"]),
                   weight_decay=float(payload["weight_decay"]),
                   buffers=tuple(payload["buffers"]))


def sgd_step(params, optimizer_state, grads, lr):
    """One SGD momentum step: buf <- mu*buf + (g + wd*p); p <- p - lr*buf.

    Weight decay skips bias and norm groups. `grads` is a flat vector in
    parameter-group order. Returns (new params, new optimizer state).
    """
    decayed_roles = (models.ROLE_CONV, models.ROLE_DENSE)
    mu, wd = optimizer_state.momentum, optimizer_state.weight_decay
    total = models.param_count(params)
    if grads.numel() != total:
        raise TrainerError(f"gradient vector length {grads.numel()} != parameter count {total}")
    new_groups, new_bufs = [], []
    offset = 0
    for g, buf in zip(params.groups, optimizer_state.buffers):
        n = g.array.numel()
        grad = grads[offset:offset + n].reshape(g.array.shape)
        offset += n
        if wd != 0.0 and g.role in decayed_roles:
            grad = grad + wd * g.array
        buf = mu * buf + grad
        new_groups.append(models.ParamGroup(g.name, (g.array - lr * buf).detach(), g.role))
        new_bufs.append(buf.detach())
    new_params = models.ModelParameters(groups=tuple(new_groups), buffers=params.buffers,
                                        arch=params.arch)
    return new_params, replace(optimizer_state, buffers=tuple(new_bufs))


# ---------------------------------------------------------------------------
# temporal ensembling buffer

@dataclass(frozen=True)
class EnsembleBuffer:
    raw: torch.Tensor            # n x C accumulated predictions, zeros at start
    momentum: float
    last_epoch: torch.Tensor     # n, epoch of last update (-1 = never)
    update_counts: torch.Tensor  # n

    @classmethod
    def init(cls, n, class_count, momentum):
        if not 0.0 <= momentum < 1.0:
            raise TrainerError("ensemble momentum must be in [0,1)")
        return cls(raw=torch.zeros((n, class_count), dtype=models.DTYPE),
                   momentum=momentum,
                   last_epoch=torch.full((n,), -1, dtype=torch.int64),
                   update_counts=torch.zeros(n, dtype=torch.int64))


def update_ensemble(buffer, sample_ids, probs, epoch):
    """raw_i <- eta*raw_i + (1-eta)*probs_i for the listed samples.

    Each sample may be updated at most once per epoch; a duplicate raises.
    """
    ids = sample_ids.to(torch.int64)
    if ids.unique().numel() != ids.numel():
        raise TrainerError("duplicate sample_id in one ensemble update")
    if bool((buffer.last_epoch[ids] == epoch).any()):
        raise TrainerError(f"sample updated twice in epoch {epoch}")
    raw = buffer.raw.clone()
    eta = buffer.momentum
    raw[ids] = eta * raw[ids] + (1.0 - eta) * probs.to(models.DTYPE)
    last = buffer.last_epoch.clone()
    last[ids] = epoch
    counts = buffer.update_counts.clone()
    counts[ids] += 1
    return replace(buffer, raw=raw, last_epoch=last, update_counts=counts)


def ensemble_read(buffer, sample_ids):
    """Normalized reads p-hat for the listed samples.

    Never-updated rows read as the uniform distribution; the second return
    value flags them.
    """
    ids = sample_ids.to(torch.int64)
    raw = buffer.raw[ids]
    sums = raw.sum(dim=1, keepdim=True)
    never = buffer.update_counts[ids] == 0
    reads = raw / sums.clamp(min=1e-12)
    if bool(never.any()):
        reads = reads.clone()
        reads[never] = 1.0 / buffer.raw.shape[1]
    return reads, never


# ---------------------------------------------------------------------------
# training configuration and result

@dataclass(frozen=True)
class TrainRunConfig:
    arch: models.ArchSpec
    objective: objectives.ObjectiveConfig
    attack: PerturbationSpec
    lr_schedule: Schedule
    epochs: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    eval_cadence: int = 1
    selection_attack: PerturbationSpec = None
    augmentation: data_mod.AugmentationSpec = None
    run_dir: str = None
    config_hash: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainerError("epochs must be >= 1")
        if self.eval_cadence < 1:
            raise TrainerError("eval_cadence must be >= 1")
        if self.selection_attack is None:
            object.__setattr__(self, "selection_attack",
                               replace(self.attack, loss_kind="ce", steps=10))


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_robust_acc: float
    best_params: models.ModelParameters
    final_params: models.ModelParameters
    final_optimizer: OptimizerState
    ensemble: EnsembleBuffer = None
    run_dir: str = None
    best_path: str = None
    final_path: str = None


@dataclass
class BatchContext:
    """Snapshot handed to on_batch hooks (read-only by contract)."""
    epoch: int
    batch_index: int
    iteration: int
    lr: float
    params: models.ModelParameters
    batch: data_mod.ExampleBatch
    adv_inputs: torch.Tensor
    breakdown: objectives.LossBreakdown
    config: TrainRunConfig


def history_to_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in HISTORY_COLUMNS])


def history_from_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            row = {}
            for c in HISTORY_COLUMNS:
                v = rec.get(c, "")
                if v == "" or v is None:
                    row[c] = None
                elif c == "epoch":
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


def _attack_loss_kind(objective):
    if objective.kind in objectives.TRADES_KINDS:
        return "kl_vs_clean"
    if objective.kind in objectives.TE_KINDS and objective.attack_ascends_te:
        return "ce_te"
    return "ce"


def train(config, train_dataset, test_dataset, hooks=None):
    """Run the configured objective over the training set; returns TrainResult.

    Per epoch: shuffle, (augment), attack each batch with the objective's
    recipe, take one SGD step per batch, advance the ensemble buffer once per
    sample, and at the eval cadence score natural/robust test accuracy with
    the selection attack, tracking the best checkpoint by robust accuracy.
    """
    hooks = hooks or {}
    obj = config.objective
    params = models.init_model(config.arch)
    opt = OptimizerState.init(params, config.momentum, config.weight_decay)
    use_te = obj.kind in objectives.TE_KINDS
    buffer = (EnsembleBuffer.init(len(train_dataset), train_dataset.class_count,
                                  obj.te_momentum) if use_te else None)
    attack_kind = _attack_loss_kind(obj)
    needs_adv = obj.kind != "standard_ce"
    batches_per_epoch = math.ceil(len(train_dataset) / config.batch_size)

    history = []
    best_epoch, best_acc, best_params, best_opt = -1, -math.inf, None, None

    for epoch in range(config.epochs):
        lr = schedule_value(config.lr_schedule, epoch)
        sums = {"total": 0.0, "clean_ce": 0.0, "adv_ce": 0.0, "kl": 0.0, "te": 0.0,
                "nat_correct": 0.0, "rob_correct": 0.0, "count": 0}
        gamma_now, w_now = obj.gamma(epoch), obj.te_weight_at(epoch)

        for b_idx, batch in enumerate(data_mod.iterate_batches(
                train_dataset, config.batch_size, config.seed, epoch)):
            if config.augmentation is not None and config.augmentation.enabled:
                batch = data_mod.augment_batch(batch, config.augmentation,
                                               derive_seed(config.seed, "aug", epoch, b_idx))
            atk_seed = derive_seed(config.seed, "attack", epoch, b_idx)
            with torch.no_grad():
                clean_logits = models.forward_logits(params, batch.inputs)
                clean_probs = models.stable_softmax(clean_logits)
            reads = ensemble_read(buffer, batch.sample_ids)[0] if use_te else None

            adv = None
            rob_inputs = None
            if needs_adv:
                spec = replace(config.attack, loss_kind=attack_kind, seed=atk_seed)
                adv = pgd_attack(params, batch, spec,
                                 clean_probs=clean_probs if attack_kind == "kl_vs_clean" else None,
                                 te_reads=reads if attack_kind == "ce_te" else None,
                                 te_weight=w_now if attack_kind == "ce_te" else 0.0)
                if attack_kind == "ce":
                    rob_inputs = adv
                else:
                    # robust training accuracy is always scored against the CE adversary
                    rob_inputs = pgd_attack(params, batch,
                                            replace(spec, loss_kind="ce"))

            grads, breakdown = objectives.grad_params(
                obj, params, batch, adv, ensemble_reads=reads, epoch=epoch,
                terms=("total",), train_mode=True)
            if not math.isfinite(breakdown.total):
                record = {"epoch": epoch, "batch": b_idx, "breakdown": breakdown}
                if config.run_dir:
                    os.makedirs(config.run_dir, exist_ok=True)
                    history_to_csv(history, os.path.join(config.run_dir, "history.csv"))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", record)

            with torch.no_grad():
                nat_correct = (clean_logits.argmax(dim=1) == batch.labels).sum().item()
                if rob_inputs is not None:
                    rob_logits = models.forward_logits(params, rob_inputs)
                    rob_correct = (rob_logits.argmax(dim=1) == batch.labels).sum().item()
                else:
                    rob_correct = nat_correct

            if "on_batch" in hooks:
                hooks["on_batch"](BatchContext(
                    epoch=epoch, batch_index=b_idx,
                    iteration=epoch * batches_per_epoch + b_idx, lr=lr, params=params,
                    batch=batch, adv_inputs=adv, breakdown=breakdown, config=config))

            params, opt = sgd_step(params, opt, grads["total"], lr)
            if params.buffers:
                params = models.refresh_norm_stats(params, adv if adv is not None else batch.inputs)
            if use_te:
                buffer = update_ensemble(buffer, batch.sample_ids, clean_probs, epoch)

            b = len(batch)
            sums["count"] += b
            sums["nat_correct"] += nat_correct
            sums["rob_correct"] += rob_correct
            sums["total"] += breakdown.total * b
            sums["clean_ce"] += breakdown.clean_ce * b
            sums["adv_ce"] += breakdown.adv_ce * b
            sums["kl"] += breakdown.kl_term * b
            sums["te"] += breakdown.te_term * b

        n_seen = sums["count"]
        do_eval = ((epoch + 1) % config.eval_cadence == 0) or (epoch == config.epochs - 1)
        test_nat = test_rob = None
        if do_eval and test_dataset is not None:
            eval_spec = replace(config.selection_attack,
                                seed=derive_seed(config.seed, "eval", epoch))
            test_nat = evaluation.evaluate(params, test_dataset)
            test_rob = evaluation.evaluate(params, test_dataset, eval_spec)
            if test_rob > best_acc:
                best_acc, best_epoch = test_rob, epoch
                best_params = models.detach_params(params)
                best_opt = replace(opt, buffers=tuple(b.clone() for b in opt.buffers))

        row = {
            "epoch": epoch, "lr": lr,
            "train_nat_acc": 100.0 * sums["nat_correct"] / n_seen,
            "train_rob_acc": 100.0 * sums["rob_correct"] / n_seen,
            "test_nat_acc": None if test_nat is None else 100.0 * test_nat,
            "test_rob_acc": None if test_rob is None else 100.0 * test_rob,
            "loss_total": sums["total"] / n_seen,
            "loss_clean_ce": sums["clean_ce"] / n_seen,
            "loss_adv_ce": sums["adv_ce"] / n_seen,
            "loss_kl": sums["kl"] / n_seen,
            "loss_te": sums["te"] / n_seen,
            "gamma": gamma_now, "te_weight": w_now,
        }
        history.append(row)
        if "on_epoch" in hooks:
            hooks["on_epoch"](epoch, row, params)

    if best_params is None:  # no evaluation ran; fall back to the final snapshot
        best_epoch, best_acc = config.epochs - 1, float("nan")
        best_params, best_opt = models.detach_params(params), opt

    result = TrainResult(history=history, best_epoch=best_epoch, best_robust_acc=best_acc,
                         best_params=best_params, final_params=params, final_optimizer=opt,
                         ensemble=buffer)
    if config.run_dir:
        os.makedirs(config.run_dir, exist_ok=True)
        history_to_csv(history, os.path.join(config.run_dir, "history.csv"))
        meta = {"config_hash": config.config_hash, "arch_tag": params.arch_tag}
        best_path = os.path.join(config.run_dir, "ckpt_best")
        final_path = os.path.join(config.run_dir, "ckpt_final")
        models.save_checkpoint(best_params, best_opt,
                               dict(meta, epoch=best_epoch, robust_acc=best_acc), best_path)
        models.save_checkpoint(params, opt,
                               dict(meta, epoch=config.epochs - 1), final_path)
        result.run_dir = config.run_dir
        result.best_path, result.final_path = best_path, final_path
    return result
