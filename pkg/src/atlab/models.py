"""Small differentiable classifiers over named, grouped parameter arrays.

Models are pure functions of (ModelParameters, inputs): the parameter container
is an immutable snapshot, forward passes never mutate it, and gradients are
taken with torch autograd against cloned leaves. Norm-layer running statistics
(resnet_small only) live in `buffers` and are refreshed explicitly by the
trainer via `refresh_norm_stats`.

Families:
  linear        flatten -> dense
  mlp           flatten -> [dense+relu]* -> dense
  convnet       [conv3x3+relu]* with maxpool after every 2nd conv -> dense
  resnet_small  conv stem + 3 residual stages (batch norm) -> avgpool -> dense
"""

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .rng import derive_seed, generator

DTYPE = torch.float64

ROLE_CONV = "conv_filter"
ROLE_DENSE = "dense"
ROLE_BIAS = "bias"
ROLE_SCALE = "norm_scale"
ROLE_SHIFT = "norm_shift"

FAMILIES = ("linear", "mlp", "convnet", "resnet_small")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_VERSION = 1
CKPT_MANIFEST = "manifest.json"


class ModelError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    class_count: int
    input_shape: tuple            # (d,) or (H, W, C)
    widths: tuple = ()            # hidden sizes / conv channels / stage channels
    init_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unsupported family {self.family!r}")
        if self.class_count < 2:
            raise ModelError("class_count must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        widths = tuple(int(w) for w in self.widths)
        if not widths:
            widths = {"linear": (), "mlp": (32,), "convnet": (16, 16, 32, 32),
                      "resnet_small": (32, 64, 128)}[self.family]
        object.__setattr__(self, "widths", widths)
        if self.family in ("convnet", "resnet_small") and len(self.input_shape) != 3:
            raise ModelError(f"{self.family} needs an (H, W, C) input shape")

    @property
    def arch_tag(self):
        shape = "x".join(str(s) for s in self.input_shape)
        widths = ",".join(str(w) for w in self.widths)
        return f"{self.family}[{widths}]@{shape}->{self.class_count}"

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))


@dataclass(frozen=True)
class ParamGroup:
    name: str
    array: torch.Tensor
    role: str


@dataclass(frozen=True)
class ModelParameters:
    groups: tuple                 # tuple[ParamGroup]
    buffers: tuple                # tuple[(name, tensor)] running norm stats
    arch: ArchSpec

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ModelError("parameter group names must be unique")
        for g in self.groups:
            if not bool(torch.isfinite(g.array).all()):
                raise ModelError(f"non-finite values in parameter group {g.name!r}")

    @property
    def arch_tag(self):
        return self.arch.arch_tag

    @property
    def layer_count(self):
        """Number of weight-carrying groups (conv + dense)."""
        return sum(1 for g in self.groups if g.role in (ROLE_CONV, ROLE_DENSE))

    def group(self, name):
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def tensors(self):
        return [g.array for g in self.groups]

    def named(self):
        return {g.name: g.array for g in self.groups}

    def buffer_dict(self):
        return {name: arr for name, arr in self.buffers}


@dataclass(frozen=True)
class GroupView:
    name: str
    role: str
    array: torch.Tensor
    l1: float
    l2: float


# ---------------------------------------------------------------------------
# initialization

def _uniform(g, shape, fan_in):
    bound = 1.0 / float(fan_in) ** 0.5
    t = torch.empty(shape, dtype=DTYPE)
    t.uniform_(-bound, bound, generator=g)
    return t


def init_model(spec):
    """Fan-in-scaled uniform init for weights, zeros for biases; deterministic in init_seed."""
    g = generator(derive_seed(spec.init_seed, "init", spec.arch_tag))
    groups, buffers = [], []
    C = spec.class_count

    def dense(name, out_f, in_f, bias=True):
        groups.append(ParamGroup(f"{name}.weight", _uniform(g, (out_f, in_f), in_f), ROLE_DENSE))
        if bias:
            groups.append(ParamGroup(f"{name}.bias", torch.zeros(out_f, dtype=DTYPE), ROLE_BIAS))

    def conv(name, out_c, in_c, k=3, bias=True):
        fan_in = in_c * k * k
        groups.append(ParamGroup(f"{name}.weight", _uniform(g, (out_c, in_c, k, k), fan_in), ROLE_CONV))
        if bias:
            groups.append(ParamGroup(f"{name}.bias", torch.zeros(out_c, dtype=DTYPE), ROLE_BIAS))

    def bn(name, c):
        groups.append(ParamGroup(f"{name}.scale", torch.ones(c, dtype=DTYPE), ROLE_SCALE))
        groups.append(ParamGroup(f"{name}.shift", torch.zeros(c, dtype=DTYPE), ROLE_SHIFT))
        buffers.append((f"{name}.running_mean", torch.zeros(c, dtype=DTYPE)))
        buffers.append((f"{name}.running_var", torch.ones(c, dtype=DTYPE)))

    if spec.family == "linear":
        dense("fc", C, spec.input_dim)
    elif spec.family == "mlp":
        prev = spec.input_dim
        for i, h in enumerate(spec.widths):
            dense(f"hidden{i}", h, prev)
            prev = h
        dense("head", C, prev)
    elif spec.family == "convnet":
        h, w, in_c = spec.input_shape
        prev = in_c
        for i, ch in enumerate(spec.widths):
            conv(f"conv{i}", ch, prev)
            prev = ch
            if i % 2 == 1:
                h, w = h // 2, w // 2
        dense("head", C, h * w * prev)
    elif spec.family == "resnet_small":
        _, _, in_c = spec.input_shape
        conv("stem", spec.widths[0], in_c, bias=False)
        bn("stem.bn", spec.widths[0])
        prev = spec.widths[0]
        for s, ch in enumerate(spec.widths):
            stride = 1 if s == 0 else 2
            conv(f"stage{s}.conv1", ch, prev, bias=False)
            bn(f"stage{s}.bn1", ch)
            conv(f"stage{s}.conv2", ch, ch, bias=False)
            bn(f"stage{s}.bn2", ch)
            if stride != 1 or prev != ch:
                conv(f"stage{s}.skip", ch, prev, k=1, bias=False)
                bn(f"stage{s}.skip_bn", ch)
            prev = ch
        dense("head", C, prev)
    return ModelParameters(groups=tuple(groups), buffers=tuple(buffers), arch=spec)


# ---------------------------------------------------------------------------
# forward passes

def _as_images(spec, x):
    h, w, c = spec.input_shape
    if x.dim() == 2:
        x = x.reshape(-1, h, w, c)
    if x.shape[1:] != (h, w, c):
        raise ModelError(f"input shape {tuple(x.shape[1:])} does not match arch {spec.input_shape}")
    return x.permute(0, 3, 1, 2)  # NHWC -> NCHW


def _flat(spec, x):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != spec.input_dim:
        raise ModelError(f"input dim {flat.shape[1]} does not match arch {spec.input_dim}")
    return flat


def _bn_apply(x, pd, buf, name, train_mode, stats_out=None):
    scale, shift = pd[f"{name}.scale"], pd[f"{name}.shift"]
    if train_mode:
        dims = (0, 2, 3)
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        if stats_out is not None:
            count = x.numel() // x.shape[1]
            bessel = count / max(count - 1, 1)
            stats_out.append((name, mean.detach(), (var * bessel).detach()))
        m, v = mean, var
    else:
        m, v = buf[f"{name}.running_mean"], buf[f"{name}.running_var"]
    inv = torch.rsqrt(v + BN_EPS)
    return (x - m.view(1, -1, 1, 1)) * (inv * scale).view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)


def _forward(params, x, train_mode, stats_out=None):
    spec = params.arch
    pd = params.named()
    if spec.family == "linear":
        return _flat(spec, x) @ pd["fc.weight"].t() + pd["fc.bias"]
    if spec.family == "mlp":
        h = _flat(spec, x)
        for i in range(len(spec.widths)):
            h = F.relu(h @ pd[f"hidden{i}.weight"].t() + pd[f"hidden{i}.bias"])
        return h @ pd["head.weight"].t() + pd["head.bias"]
    if spec.family == "convnet":
        h = _as_images(spec, x)
        for i in range(len(spec.widths)):
            h = F.relu(F.conv2d(h, pd[f"conv{i}.weight"], pd[f"conv{i}.bias"], padding=1))
            if i % 2 == 1:
                h = F.max_pool2d(h, 2)
        h = h.reshape(h.shape[0], -1)
        return h @ pd["head.weight"].t() + pd["head.bias"]
    if spec.family == "resnet_small":
        buf = params.buffer_dict()
        h = _as_images(spec, x)
        h = F.conv2d(h, pd["stem.weight"], padding=1)
        h = F.relu(_bn_apply(h, pd, buf, "stem.bn", train_mode, stats_out))
        for s in range(len(spec.widths)):
            stride = 1 if s == 0 else 2
            out = F.conv2d(h, pd[f"stage{s}.conv1.weight"], stride=stride, padding=1)
            out = F.relu(_bn_apply(out, pd, buf, f"stage{s}.bn1", train_mode, stats_out))
            out = F.conv2d(out, pd[f"stage{s}.conv2.weight"], padding=1)
            out = _bn_apply(out, pd, buf, f"stage{s}.bn2", train_mode, stats_out)
            if f"stage{s}.skip.weight" in pd:
                sk = F.conv2d(h, pd[f"stage{s}.skip.weight"], stride=stride)
                sk = _bn_apply(sk, pd, buf, f"stage{s}.skip_bn", train_mode, stats_out)
            else:
                sk = h
            h = F.relu(out + sk)
        h = h.mean(dim=(2, 3))
        return h @ pd["head.weight"].t() + pd["head.bias"]
    raise ModelError(f"unsupported family {spec.family!r}")


def forward_logits(params, inputs, train_mode=False):
    """Logits (batch x C). train_mode selects batch statistics for norm layers."""
    return _forward(params, inputs.to(DTYPE), train_mode)


def forward_probs(params, inputs, train_mode=False):
    """Softmax probabilities with max-subtraction stabilization."""
    logits = forward_logits(params, inputs, train_mode)
    return stable_softmax(logits)


def stable_softmax(logits):
    z = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def refresh_norm_stats(params, inputs):
    """New ModelParameters with running stats advanced one EMA step on this batch."""
    if not params.buffers:
        return params
    stats = []
    _forward(params, inputs.to(DTYPE), train_mode=True, stats_out=stats)
    updates = {}
    for name, mean, var in stats:
        updates[f"{name}.running_mean"] = mean
        updates[f"{name}.running_var"] = var
    new_buffers = []
    for name, arr in params.buffers:
        stat = updates.get(name)
        if stat is None:
            new_buffers.append((name, arr))
        else:
            new_buffers.append((name, (1.0 - BN_MOMENTUM) * arr + BN_MOMENTUM * stat))
    return ModelParameters(groups=params.groups, buffers=tuple(new_buffers), arch=params.arch)


# ---------------------------------------------------------------------------
# parameter plumbing

def params_with_grad(params):
    """Snapshot whose group tensors are fresh autograd leaves."""
    groups = tuple(ParamGroup(g.name, g.array.detach().clone().requires_grad_(True), g.role)
                   for g in params.groups)
    return ModelParameters(groups=groups, buffers=params.buffers, arch=params.arch)


def detach_params(params):
    groups = tuple(ParamGroup(g.name, g.array.detach().clone(), g.role) for g in params.groups)
    return ModelParameters(groups=groups, buffers=params.buffers, arch=params.arch)


def flatten_params(params):
    """Concatenate all group arrays into one vector (group order)."""
    return torch.cat([g.array.reshape(-1) for g in params.groups])


def unflatten_like(params, vec):
    """Inverse of flatten_params: rebuild a ModelParameters from a flat vector."""
    total = sum(g.array.numel() for g in params.groups)
    if vec.numel() != total:
        raise ModelError(f"vector length {vec.numel()} != parameter count {total}")
    groups, offset = [], 0
    for g in params.groups:
        n = g.array.numel()
        groups.append(ParamGroup(g.name, vec[offset:offset + n].reshape(g.array.shape).detach().clone(), g.role))
        offset += n
    return ModelParameters(groups=tuple(groups), buffers=params.buffers, arch=params.arch)


def param_count(params):
    return sum(g.array.numel() for g in params.groups)


def param_group_views(params):
    """Per-group array views with l1/l2 norms (spectral norms live in complexity)."""
    views = []
    for g in params.groups:
        views.append(GroupView(name=g.name, role=g.role, array=g.array,
                               l1=g.array.abs().sum().item(), l2=g.array.norm().item()))
    return views


def conv_geometry(params):
    """Input spatial size / stride / padding per conv group, for operator-level norms."""
    spec = params.arch
    geo = {}
    if spec.family == "convnet":
        h, w, _ = spec.input_shape
        for i in range(len(spec.widths)):
            geo[f"conv{i}.weight"] = {"height": h, "width": w, "stride": 1, "padding": 1}
            if i % 2 == 1:
                h, w = h // 2, w // 2
    elif spec.family == "resnet_small":
        h, w, _ = spec.input_shape
        geo["stem.weight"] = {"height": h, "width": w, "stride": 1, "padding": 1}
        for s in range(len(spec.widths)):
            stride = 1 if s == 0 else 2
            geo[f"stage{s}.conv1.weight"] = {"height": h, "width": w, "stride": stride, "padding": 1}
            if f"stage{s}.skip.weight" in params.named():
                geo[f"stage{s}.skip.weight"] = {"height": h, "width": w, "stride": stride, "padding": 0}
            if stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            geo[f"stage{s}.conv2.weight"] = {"height": h, "width": w, "stride": 1, "padding": 1}
    return geo


# ---------------------------------------------------------------------------
# checkpoints

def _write_array(path, arr):
    arr.detach().numpy().astype("<f8").tofile(path)


def _read_array(path, shape):
    raw = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise CheckpointError(f"{path}: holds {raw.size} values, expected {expected}")
    return torch.from_numpy(raw.reshape(shape).copy())


def save_checkpoint(params, optimizer_state, metadata, path):
    """Write manifest.json plus one little-endian f64 binary per array.

    optimizer_state is duck-typed: None, or an object with .momentum,
    .weight_decay and .buffers (tensors aligned with the parameter groups).
    """
    os.makedirs(path, exist_ok=True)
    arrays = []

    def add(kind, name, arr, role=None):
        fname = f"arr_{len(arrays):03d}.bin"
        _write_array(os.path.join(path, fname), arr)
        entry = {"kind": kind, "name": name, "shape": list(arr.shape), "dtype": "f64", "file": fname}
        if role is not None:
            entry["role"] = role
        arrays.append(entry)

    for g in params.groups:
        add("param", g.name, g.array, g.role)
    for name, arr in params.buffers:
        add("buffer", name, arr)
    opt_meta = None
    if optimizer_state is not None:
        for g, buf in zip(params.groups, optimizer_state.buffers):
            add("opt", g.name, buf)
        opt_meta = {"momentum": float(optimizer_state.momentum),
                    "weight_decay": float(optimizer_state.weight_decay)}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch_tag": params.arch_tag,
        "arch": asdict(params.arch),
        "epoch": metadata.get("epoch"),
        "config_hash": metadata.get("config_hash"),
        "metadata": metadata,
        "optimizer": opt_meta,
        "arrays": arrays,
    }
    with open(os.path.join(path, CKPT_MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path, expected_arch_tag=None):
    """Read a checkpoint directory -> (params, optimizer_payload | None, metadata).

    optimizer_payload is a dict {"momentum", "weight_decay", "buffers"}; the
    trainer rebuilds its OptimizerState from it.
    """
    manifest_path = os.path.join(path, CKPT_MANIFEST)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"missing checkpoint manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} unsupported")
    if expected_arch_tag is not None and manifest["arch_tag"] != expected_arch_tag:
        raise CheckpointError(f"arch_tag mismatch: checkpoint {manifest['arch_tag']!r}, "
                              f"expected {expected_arch_tag!r}")
    arch_d = manifest["arch"]
    spec = ArchSpec(family=arch_d["family"], class_count=arch_d["class_count"],
                    input_shape=tuple(arch_d["input_shape"]), widths=tuple(arch_d["widths"]),
                    init_seed=arch_d.get("init_seed", 0))
    groups, buffers, opt_buffers = [], [], []
    for entry in manifest["arrays"]:
        arr = _read_array(os.path.join(path, entry["file"]), tuple(entry["shape"]))
        if entry["kind"] == "param":
            groups.append(ParamGroup(entry["name"], arr, entry["role"]))
        elif entry["kind"] == "buffer":
            buffers.append((entry["name"], arr))
        elif entry["kind"] == "opt":
            opt_buffers.append(arr)
    params = ModelParameters(groups=tuple(groups), buffers=tuple(buffers), arch=spec)
    opt_payload = None
    if manifest.get("optimizer") is not None:
        opt_payload = dict(manifest["optimizer"])
        opt_payload["buffers"] = opt_buffers
    return params, opt_payload, manifest["metadata"]
