"""Labelled datasets: MNIST IDX ingestion, planted synthetic blobs, splits."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng, round_half_up

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    K: int
    ids: np.ndarray
    name: str = "dataset"
    # optional per-sample generator annotations (component, is_duplicate, is_flipped)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise DataError("features, labels and ids disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise DataError(f"labels must lie in [0, {self.K})")
        if len(np.unique(self.ids)) != n:
            raise DataError("sample ids must be unique")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")
        if n and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise DataError("features must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        meta = {k: np.asarray(v)[index] for k, v in self.meta.items()}
        return LabeledDataset(self.features[index], self.labels[index], self.K,
                              self.ids[index], self.name, meta)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def manifest(self, source: str, seed: int | None) -> dict:
        return {"name": self.name, "n": self.n, "p": self.p, "K": self.K,
                "normalization": "div255" if source == "idx" else "clip01",
                "source": source, "seed": seed}


def _read_idx(path, expected_magic: int) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: unexpected magic {magic} (wanted {expected_magic})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = list(struct.unpack(">" + "I" * ndim, raw[4:header]))
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise DataError(f"{path}: truncated file, expected {count} data bytes, found {len(body)}")
    return dims, body


def load_idx(images_path, labels_path, K: int = 10, name: str = "mnist") -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    dims, body = _read_idx(images_path, IMAGE_MAGIC)
    if len(dims) != 3:
        raise DataError(f"{images_path}: expected 3 dims, got {dims}")
    ldims, lbody = _read_idx(labels_path, LABEL_MAGIC)
    if ldims[0] != dims[0]:
        raise DataError(f"count mismatch: {dims[0]} images vs {ldims[0]} labels")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], dims[1] * dims[2])
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(pixels / 255.0, labels, K, np.arange(dims[0]), name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n) + labels.tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 2
    n_per_class: int = 256
    dim: int = 16
    cluster_std: float = 0.15
    duplicate_rate: float = 0.0
    flip_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.duplicate_rate <= 1.0 or not 0.0 <= self.flip_rate <= 1.0:
            raise DataError("duplicate_rate and flip_rate must lie in [0, 1]")
        if self.n_per_class < 1 or self.K < 2:
            raise DataError("need K >= 2 and n_per_class >= 1")
        if self.dim < self.K:
            raise DataError("dim must be at least K so that class means are unit-spaced")


def class_means(K: int, dim: int) -> np.ndarray:
    # 0.25 + e_k / sqrt(2): every pair of means sits at distance 1, inside [0, 1]
    means = np.full((K, dim), 0.25)
    means[np.arange(K), np.arange(K)] += 1.0 / np.sqrt(2.0)
    return means


def synth_generate(spec: SyntheticSpec) -> LabeledDataset:
    """Gaussian blobs with planted near-duplicates and label flips.

    Per class, ``round(duplicate_rate * n_per_class)`` samples are replaced by
    0.01-noise copies of a single class prototype (they become the head
    cluster), and ``round(flip_rate * n)`` labels across the whole set are
    moved to a uniformly chosen different class.
    """
    rng = make_rng(spec.seed)
    means = class_means(spec.K, spec.dim)
    n_dup = round_half_up(spec.duplicate_rate * spec.n_per_class)
    feats, comps, dups = [], [], []
    for k in range(spec.K):
        x = means[k] + spec.cluster_std * rng.standard_normal((spec.n_per_class, spec.dim))
        prototype = means[k] + spec.cluster_std * rng.standard_normal(spec.dim)
        dup_rows = np.sort(rng.choice(spec.n_per_class, size=n_dup, replace=False))
        x[dup_rows] = prototype + 0.01 * rng.standard_normal((n_dup, spec.dim))
        is_dup = np.zeros(spec.n_per_class, dtype=bool)
        is_dup[dup_rows] = True
        feats.append(x)
        comps.append(np.full(spec.n_per_class, k))
        dups.append(is_dup)
    features = np.clip(np.concatenate(feats), 0.0, 1.0)
    component = np.concatenate(comps)
    labels = component.copy()
    n = labels.size
    n_flip = round_half_up(spec.flip_rate * n)
    flipped = np.zeros(n, dtype=bool)
    if n_flip:
        rows = np.sort(rng.choice(n, size=n_flip, replace=False))
        shift = rng.integers(1, spec.K, size=n_flip)
        labels[rows] = (labels[rows] + shift) % spec.K
        flipped[rows] = True
    meta = {"component": component, "is_duplicate": np.concatenate(dups), "is_flipped": flipped}
    return LabeledDataset(features, labels, spec.K, np.arange(n), "synthetic", meta)


def split(ds: LabeledDataset, train_frac: float, rng: np.random.Generator):
    """Class-stratified split into (train, validation)."""
    if not 0.0 < train_frac < 1.0:
        raise DataError(f"train_frac must lie in (0, 1), got {train_frac}")
    train_idx, val_idx = [], []
    for k in range(ds.K):
        idx = ds.class_indices(k)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DataError(f"class {k} has fewer than 2 samples; cannot split")
        idx = rng.permutation(idx)
        n_train = min(max(round_half_up(train_frac * idx.size), 1), idx.size - 1)
        train_idx.append(idx[:n_train])
        val_idx.append(idx[n_train:])
    return (ds.subset(np.sort(np.concatenate(train_idx))),
            ds.subset(np.sort(np.concatenate(val_idx))))


def subset_sample(ds: LabeledDataset, per_class: int, rng: np.random.Generator) -> LabeledDataset:
    """Class-balanced subset of ``per_class`` samples per class, sorted by position."""
    chosen = []
    for k in range(ds.K):
        idx = ds.class_indices(k)
        if idx.size < per_class:
            raise DataError(f"class {k} has {idx.size} samples, fewer than per_class={per_class}")
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    return ds.subset(np.sort(np.concatenate(chosen)))


def balanced_partition(ds: LabeledDataset, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Tile ``ds`` into ``n // size`` disjoint class-balanced blocks of positions.

    Each block holds ``size // K`` samples of every class, drawn without
    replacement; this is the subset construction of the difficulty-correlation
    experiment.
    """
    if size % ds.K:
        raise DataError(f"block size {size} is not a multiple of K={ds.K}")
    per = size // ds.K
    shuffled = [rng.permutation(ds.class_indices(k)) for k in range(ds.K)]
    n_blocks = min(s.size for s in shuffled) // per
    if n_blocks == 0:
        raise DataError("not enough samples per class for one block")
    return [np.sort(np.concatenate([s[b * per:(b + 1) * per] for s in shuffled]))
            for b in range(n_blocks)]


def save_dataset(ds: LabeledDataset, path) -> None:
    np.savez(path, features=ds.features, labels=ds.labels, ids=ds.ids, K=ds.K,
             name=ds.name, **{f"meta_{k}": v for k, v in ds.meta.items()})


def load_dataset(path) -> LabeledDataset:
    with np.load(path, allow_pickle=False) as f:
        meta = {k[5:]: f[k] for k in f.files if k.startswith("meta_")}
        return LabeledDataset(f["features"], f["labels"], int(f["K"]), f["ids"], str(f["name"]), meta)


def write_manifest(ds: LabeledDataset, path, source: str, seed: int | None) -> None:
    Path(path).write_text(json.dumps(ds.manifest(source, seed), indent=2, sort_keys=True) + "\n")
