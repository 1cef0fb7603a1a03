"""Dataset ingestion, synthetic generation, label corruption, augmentation, batching.

In-memory tensors are float64; persisted precision is declared per dataset
("u8" or "f32") so a save/load round trip is bit-exact. Every operation is a
pure function of (inputs, seed).
"""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .rng import derive_seed, generator

DTYPE = torch.float64

MANIFEST_NAME = "manifest.json"
INPUTS_FILE = "inputs.bin"
LABELS_FILE = "labels.bin"


class DataError(ValueError):
    """Malformed dataset, manifest, or spec."""


@dataclass(frozen=True)
class Dataset:
    inputs: torch.Tensor          # n x d or n x H x W x ch, float64 in [0,1]
    labels: torch.Tensor          # n, int64 in {0..C-1}
    class_count: int
    split_tag: str = "train"
    storage_dtype: str = "f32"    # persisted precision: u8 | f32
    name: str = "dataset"
    sample_ids: torch.Tensor = field(default=None)

    def __post_init__(self):
        inputs = self.inputs.to(DTYPE)
        labels = self.labels.to(torch.int64)
        n = inputs.shape[0]
        if labels.shape != (n,):
            raise DataError(f"labels shape {tuple(labels.shape)} does not match n={n}")
        if self.class_count < 2:
            raise DataError("class_count must be >= 2")
        if n > 0:
            if inputs.min().item() < 0.0 or inputs.max().item() > 1.0:
                raise DataError("inputs must lie in [0,1]")
            if labels.min().item() < 0 or labels.max().item() >= self.class_count:
                raise DataError(f"labels must lie in [0,{self.class_count - 1}]")
        ids = self.sample_ids
        if ids is None:
            ids = torch.arange(n, dtype=torch.int64)
        else:
            ids = ids.to(torch.int64)
            if not torch.equal(ids, torch.arange(n, dtype=torch.int64)):
                raise DataError("sample_ids must be the identity permutation 0..n-1")
        if self.storage_dtype not in ("u8", "f32"):
            raise DataError(f"unsupported storage dtype {self.storage_dtype!r}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def sample_shape(self):
        return tuple(self.inputs.shape[1:])


@dataclass(frozen=True)
class ExampleBatch:
    inputs: torch.Tensor
    labels: torch.Tensor
    sample_ids: torch.Tensor

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class CorruptionSpec:
    noise_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise DataError(f"noise_rate must be in [0,1], got {self.noise_rate}")


@dataclass(frozen=True)
class AugmentationSpec:
    crop_padding: int = 4
    flip_probability: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.crop_padding < 0:
            raise DataError("crop_padding must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise DataError("flip_probability must be in [0,1]")


# ---------------------------------------------------------------------------
# packed on-disk format

def save_dataset(dataset, path):
    """Write the packed directory format: manifest.json + inputs.bin + labels.bin."""
    os.makedirs(path, exist_ok=True)
    arr = dataset.inputs.numpy()
    if dataset.storage_dtype == "u8":
        raw = np.rint(arr * 255.0).astype("<u1")
    else:
        raw = arr.astype("<f4")
    raw.tofile(os.path.join(path, INPUTS_FILE))
    dataset.labels.numpy().astype("<i8").tofile(os.path.join(path, LABELS_FILE))
    manifest = {
        "name": dataset.name,
        "n": len(dataset),
        "shape": list(dataset.sample_shape),
        "class_count": dataset.class_count,
        "dtype": dataset.storage_dtype,
        "split_tag": dataset.split_tag,
        "files": {"inputs": INPUTS_FILE, "labels": LABELS_FILE},
    }
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path):
    """Load a packed dataset directory; byte-identical files reload to identical tensors."""
    manifest_path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    for key in ("n", "shape", "class_count", "dtype", "files"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")
    n = int(manifest["n"])
    shape = tuple(int(s) for s in manifest["shape"])
    dtype = manifest["dtype"]
    if dtype not in ("u8", "f32"):
        raise DataError(f"unsupported dtype {dtype!r}")
    inputs_path = os.path.join(path, manifest["files"]["inputs"])
    labels_path = os.path.join(path, manifest["files"]["labels"])
    count = n * int(np.prod(shape)) if shape else n
    raw = np.fromfile(inputs_path, dtype="<u1" if dtype == "u8" else "<f4")
    if raw.size != count:
        raise DataError(f"inputs.bin holds {raw.size} values, expected {count}")
    if dtype == "u8":
        arr = raw.astype(np.float64) / 255.0
    else:
        arr = raw.astype(np.float64)
    labels = np.fromfile(labels_path, dtype="<i8")
    if labels.size != n:
        raise DataError(f"labels.bin holds {labels.size} values, expected {n}")
    return Dataset(
        inputs=torch.from_numpy(arr.reshape((n,) + shape)),
        labels=torch.from_numpy(labels.copy()),
        class_count=int(manifest["class_count"]),
        split_tag=manifest.get("split_tag", "train"),
        storage_dtype=dtype,
        name=manifest.get("name", "dataset"),
    )


# ---------------------------------------------------------------------------
# synthetic data

def make_synthetic(class_count, per_class, dim, separation, seed,
                   sigma=0.1, image_shape=None, split_tag="train", name="synthetic",
                   mean_structure="iid"):
    """Gaussian class blobs clipped to [0,1], deterministic in seed.

    Class means sit at separation-scaled random directions around 0.5 and
    depend only on (seed, class_count, dim), so train/test splits that share a
    seed but differ in split_tag sample the same class structure with fresh
    noise. Noise is drawn at float32 precision so the dataset survives an f32
    round trip bitwise. If image_shape (H, W, C) is given, dim must equal
    H*W*C and inputs are reshaped to n x H x W x C.

    mean_structure="smooth" draws the class directions as coarse 2x2 patterns
    upsampled to the image size (low-frequency templates a convolutional net
    can generalize from); "iid" keeps white-noise directions.
    """
    if class_count < 2 or per_class < 1 or dim < 1:
        raise DataError("class_count >= 2, per_class >= 1, dim >= 1 required")
    if separation <= 0:
        raise DataError("separation must be > 0")
    if image_shape is not None and int(np.prod(image_shape)) != dim:
        raise DataError("image_shape does not match dim")
    if mean_structure not in ("iid", "smooth"):
        raise DataError(f"unknown mean_structure {mean_structure!r}")
    if mean_structure == "smooth" and image_shape is None:
        raise DataError("smooth means need an image_shape")
    g_means = generator(derive_seed(seed, "synthetic-means", class_count, dim))
    # unit directions for the class means, spread around the box center
    if mean_structure == "smooth":
        h, w, c = image_shape
        coarse = torch.randn(class_count, c, 2, 2, generator=g_means, dtype=torch.float32)
        full = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bilinear",
                                               align_corners=True)
        dirs = full.permute(0, 2, 3, 1).reshape(class_count, dim)
    else:
        dirs = torch.randn(class_count, dim, generator=g_means, dtype=torch.float32)
    dirs = dirs / dirs.norm(dim=1, keepdim=True)
    means = 0.5 + 0.5 * separation * dirs
    n = class_count * per_class
    g = generator(derive_seed(seed, "synthetic-noise", split_tag, per_class, dim))
    noise = torch.randn(n, dim, generator=g, dtype=torch.float32) * sigma
    labels = torch.arange(class_count, dtype=torch.int64).repeat_interleave(per_class)
    inputs = (means[labels] + noise).clamp_(0.0, 1.0)
    # shuffle so batches mix classes
    perm = torch.randperm(n, generator=g)
    inputs, labels = inputs[perm], labels[perm]
    inputs = inputs.to(DTYPE)
    if image_shape is not None:
        inputs = inputs.reshape((n,) + tuple(image_shape))
    return Dataset(inputs=inputs, labels=labels, class_count=class_count,
                   split_tag=split_tag, storage_dtype="f32", name=name)


def subset(dataset, count):
    """First `count` samples, re-indexed 0..count-1."""
    if count < 1 or count > len(dataset):
        raise DataError(f"subset count {count} out of range for n={len(dataset)}")
    return replace(dataset, inputs=dataset.inputs[:count].clone(),
                   labels=dataset.labels[:count].clone(), sample_ids=None)


# ---------------------------------------------------------------------------
# label corruption

def corruption_positions(n, spec):
    """The floor(noise_rate*n) positions selected for resampling, without replacement."""
    k = math.floor(spec.noise_rate * n)
    g = generator(derive_seed(spec.seed, "corrupt-select", n))
    return torch.randperm(n, generator=g)[:k]


def corrupt_labels(dataset, spec):
    """Resample the labels of floor(noise_rate*n) samples uniformly over all classes.

    Resampling may reproduce the true label, so the expected fraction of labels
    actually changed is noise_rate * (1 - 1/C). Inputs are untouched.
    """
    n = len(dataset)
    positions = corruption_positions(n, spec)
    labels = dataset.labels.clone()
    if positions.numel() > 0:
        g = generator(derive_seed(spec.seed, "corrupt-draw", n))
        labels[positions] = torch.randint(0, dataset.class_count, (positions.numel(),),
                                          generator=g, dtype=torch.int64)
    return replace(dataset, labels=labels, sample_ids=None)


# ---------------------------------------------------------------------------
# augmentation

def augment_batch(batch, spec, seed):
    """Per-sample random crop (after zero padding) and horizontal flip.

    Labels and sample_ids pass through unchanged; inputs stay in [0,1] and
    keep their shape. Requires image-shaped (n, H, W, C) inputs when enabled.
    """
    if not spec.enabled:
        return batch
    if batch.inputs.dim() != 4:
        raise DataError("augmentation needs image-shaped inputs (n, H, W, C)")
    n, h, w, _ = batch.inputs.shape
    p = spec.crop_padding
    g = generator(derive_seed(seed, "augment"))
    out = batch.inputs
    if p > 0:
        padded = torch.zeros((n, h + 2 * p, w + 2 * p, out.shape[3]), dtype=out.dtype)
        padded[:, p:p + h, p:p + w, :] = out
        rows = torch.randint(0, 2 * p + 1, (n,), generator=g)
        cols = torch.randint(0, 2 * p + 1, (n,), generator=g)
        out = torch.stack([padded[i, r:r + h, c:c + w, :]
                           for i, (r, c) in enumerate(zip(rows.tolist(), cols.tolist()))])
    else:
        out = out.clone()
    flips = torch.rand(n, generator=g, dtype=DTYPE) < spec.flip_probability
    if flips.any():
        out[flips] = out[flips].flip(2)
    return ExampleBatch(inputs=out, labels=batch.labels, sample_ids=batch.sample_ids)


# ---------------------------------------------------------------------------
# batching

def iterate_batches(dataset, batch_size, shuffle_seed, epoch):
    """Deterministic shuffled partition of the dataset (last batch may be short)."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise DataError("cannot iterate an empty dataset")
    g = generator(derive_seed(shuffle_seed, "shuffle", epoch))
    order = torch.randperm(n, generator=g)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ExampleBatch(inputs=dataset.inputs[idx], labels=dataset.labels[idx],
                           sample_ids=dataset.sample_ids[idx])


def full_batch(dataset):
    """The whole dataset as one batch, in sample_id order."""
    return ExampleBatch(inputs=dataset.inputs, labels=dataset.labels,
                        sample_ids=dataset.sample_ids)
