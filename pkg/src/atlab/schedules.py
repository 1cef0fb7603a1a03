"""Scalar schedules used for learning rates and objective weights.

Ramp kinds (linear_ramp, gaussian_ramp) evaluate to [0, 1] and ignore `base`;
piecewise/cosine/constant scale `base`.
"""

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"  # piecewise | cosine | linear_ramp | gaussian_ramp | constant
    base: float = 1.0
    milestones: tuple = field(default_factory=tuple)
    decay: float = 0.1
    total_epochs: int = 0
    ramp_length: float = 0.0

    def __post_init__(self):
        if self.kind not in ("piecewise", "cosine", "linear_ramp", "gaussian_ramp", "constant"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if self.kind == "cosine" and self.total_epochs <= 0:
            raise ValueError("cosine schedule needs total_epochs > 0")
        if self.kind in ("linear_ramp", "gaussian_ramp") and self.ramp_length <= 0:
            raise ValueError("ramp schedules need ramp_length > 0")
        if self.kind == "piecewise" and list(self.milestones) != sorted(self.milestones):
            raise ValueError("piecewise milestones must be sorted")


def schedule_value(schedule, epoch):
    """Evaluate `schedule` at integer `epoch` (pure function)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    kind = schedule.kind
    if kind == "constant":
        return schedule.base
    if kind == "piecewise":
        passed = sum(1 for m in schedule.milestones if epoch >= m)
        return schedule.base * schedule.decay ** passed
    if kind == "cosine":
        return schedule.base * 0.5 * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))
    if kind == "linear_ramp":
        return min(max(epoch / schedule.ramp_length, 0.0), 1.0)
    if kind == "gaussian_ramp":
        t = min(epoch / schedule.ramp_length, 1.0)
        return math.exp(-5.0 * (1.0 - t) ** 2)
    raise ValueError(f"unknown schedule kind: {kind!r}")


def schedule_from_dict(d):
    """Build a Schedule from a config mapping."""
    return Schedule(
        kind=d.get("kind", "constant"),
        base=float(d.get("base", 1.0)),
        milestones=tuple(d.get("milestones", ())),
        decay=float(d.get("decay", 0.1)),
        total_epochs=int(d.get("total_epochs", 0)),
        ramp_length=float(d.get("ramp_length", 0.0)),
    )
