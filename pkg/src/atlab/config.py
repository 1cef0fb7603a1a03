"""Training-run configuration: JSON file parsing, dataset construction, and a
stable hash for reproducibility metadata.

Config sections: data (path or synthetic spec, corruption, augmentation),
model (arch), objective, attack, optim, eval, out.
"""

import hashlib
import json
import os

from . import data as data_mod
from . import models, objectives, trainer
from .attacks import PerturbationSpec
from .schedules import Schedule, schedule_from_dict


class ConfigError(ValueError):
    pass


def config_hash(cfg):
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
    for section in ("model", "objective", "attack", "optim"):
        if section not in cfg:
            raise ConfigError(f"config missing section {section!r}")
    return cfg


def attack_from_dict(d, default_seed=0):
    return PerturbationSpec(
        norm=d.get("norm", "linf"),
        epsilon=float(d.get("epsilon", 8.0 / 255.0)),
        step_size=float(d.get("step_size", 2.0 / 255.0)),
        steps=int(d.get("steps", 10)),
        random_start=bool(d.get("random_start", True)),
        loss_kind=d.get("loss_kind", "ce"),
        seed=int(d.get("seed", default_seed)),
    )


def arch_from_dict(d):
    return models.ArchSpec(
        family=d["family"],
        class_count=int(d["class_count"]),
        input_shape=tuple(d["input_shape"]),
        widths=tuple(d.get("widths", ())),
        init_seed=int(d.get("init_seed", 0)),
    )


def objective_from_dict(d, epochs):
    # paper-style defaults: gamma ramps linearly and the TE weight follows a
    # gaussian ramp, both over the first half of training
    half = max(epochs / 2.0, 1.0)
    if "gamma_schedule" in d:
        gamma = schedule_from_dict(d["gamma_schedule"])
    else:
        gamma = (Schedule(kind="linear_ramp", ramp_length=half)
                 if d.get("kind") == "interpolated" else Schedule(kind="constant", base=1.0))
    if "ramp" in d:
        ramp = schedule_from_dict(d["ramp"])
    else:
        ramp = (Schedule(kind="gaussian_ramp", ramp_length=half)
                if d.get("kind", "").endswith("_te") else Schedule(kind="constant", base=1.0))
    return objectives.ObjectiveConfig(
        kind=d.get("kind", "pgd_at"),
        beta=float(d.get("beta", 6.0)),
        gamma_schedule=gamma,
        te_weight=float(d.get("te_weight", 30.0)),
        te_momentum=float(d.get("te_momentum", 0.9)),
        ramp=ramp,
        label_smoothing=float(d.get("label_smoothing", 0.0)),
        attack_ascends_te=bool(d.get("attack_ascends_te", False)),
    )


def build_datasets(data_cfg):
    """(train, test) datasets from the data section: packed paths or synthetic."""
    if "path" in data_cfg:
        train = data_mod.load_dataset(data_cfg["path"])
        test = data_mod.load_dataset(data_cfg["test_path"]) if "test_path" in data_cfg else None
    elif "synthetic" in data_cfg:
        s = data_cfg["synthetic"]
        shape = tuple(s["image_shape"]) if "image_shape" in s else None
        dim = int(s["dim"]) if "dim" in s else int(
            shape[0] * shape[1] * shape[2]) if shape else None
        if dim is None:
            raise ConfigError("synthetic data needs dim or image_shape")
        common = dict(class_count=int(s.get("class_count", 10)), dim=dim,
                      separation=float(s.get("separation", 0.5)),
                      sigma=float(s.get("sigma", 0.1)), image_shape=shape)
        # same seed, different split_tag: shared class means, fresh noise
        seed = int(s.get("seed", 0))
        train = data_mod.make_synthetic(per_class=int(s["per_class"]), seed=seed,
                                        split_tag="train", **common)
        test = data_mod.make_synthetic(per_class=int(s.get("test_per_class", s["per_class"])),
                                       seed=seed, split_tag="test", **common)
    else:
        raise ConfigError("data section needs 'path' or 'synthetic'")
    if "subset" in data_cfg:
        train = data_mod.subset(train, int(data_cfg["subset"]))
    if "corruption" in data_cfg:
        c = data_cfg["corruption"]
        train = data_mod.corrupt_labels(
            train, data_mod.CorruptionSpec(noise_rate=float(c["noise_rate"]),
                                           seed=int(c.get("seed", 0))))
    return train, test


def build_run(cfg, out_dir=None, seed=None):
    """(TrainRunConfig, train_dataset, test_dataset) from a parsed config dict."""
    optim = cfg["optim"]
    epochs = int(optim["epochs"])
    run_seed = int(optim.get("seed", 0)) if seed is None else int(seed)
    lr_cfg = optim.get("lr", {"kind": "constant", "base": 0.1})
    if isinstance(lr_cfg, (int, float)):
        lr_cfg = {"kind": "constant", "base": float(lr_cfg)}
    eval_cfg = cfg.get("eval", {})
    aug = None
    if "augmentation" in cfg.get("data", {}):
        a = cfg["data"]["augmentation"]
        aug = data_mod.AugmentationSpec(crop_padding=int(a.get("crop_padding", 4)),
                                        flip_probability=float(a.get("flip_probability", 0.5)),
                                        enabled=bool(a.get("enabled", True)))
    attack = attack_from_dict(cfg["attack"], default_seed=run_seed)
    selection = (attack_from_dict(eval_cfg["selection_attack"], default_seed=run_seed)
                 if "selection_attack" in eval_cfg
                 else None)
    run = trainer.TrainRunConfig(
        arch=arch_from_dict(cfg["model"]),
        objective=objective_from_dict(cfg["objective"], epochs),
        attack=attack,
        lr_schedule=schedule_from_dict(lr_cfg),
        epochs=epochs,
        momentum=float(optim.get("momentum", 0.9)),
        weight_decay=float(optim.get("weight_decay", 5e-4)),
        batch_size=int(optim.get("batch_size", 128)),
        seed=run_seed,
        eval_cadence=int(eval_cfg.get("cadence", 1)),
        selection_attack=selection,
        augmentation=aug,
        run_dir=out_dir if out_dir is not None else cfg.get("out", {}).get("run_dir"),
        config_hash=config_hash(cfg),
    )
    train_ds, test_ds = build_datasets(cfg.get("data", {}))
    return run, train_ds, test_ds
