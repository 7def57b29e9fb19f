"""Synthetic image datasets, IDX ingestion, and attack evaluation sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EvalSetError, FormatError

KINDS = ("blobs", "rings", "textures")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DEFAULT_KIND = "textures"
DEFAULT_N = 4000
DEFAULT_CLASSES = 8
DEFAULT_SHAPE = (1, 16, 16)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]
    train_idx: np.ndarray
    test_idx: np.ndarray
    classes: int
    seed: int | None = None
    source: str = "generated"

    def __post_init__(self):
        n = len(self.labels)
        if self.inputs.ndim != 4 or self.inputs.shape[0] != n:
            raise ConfigError(f"inputs {self.inputs.shape} do not match {n} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ConfigError("inputs must lie in [0, 1]")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ConfigError("train/test indices must partition 0..N-1")

    @property
    def ident(self) -> str:
        return f"{self.source}:n={len(self.labels)}:classes={self.classes}:seed={self.seed}"

    def describe(self) -> dict:
        return {
            "source": self.source,
            "n": int(len(self.labels)),
            "classes": int(self.classes),
            "shape": list(self.inputs.shape[1:]),
            "seed": self.seed,
        }

    def train_split(self):
        return self.inputs[self.train_idx], self.labels[self.train_idx]

    def test_split(self):
        return self.inputs[self.test_idx], self.labels[self.test_idx]


def _grid(h, w):
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    return yy, xx


def _blobs(labels, classes, shape, rng):
    c, h, w = shape
    yy, xx = _grid(h, w)
    angle = 2 * np.pi * np.arange(classes) / classes
    cy, cx = 0.5 + 0.3 * np.sin(angle), 0.5 + 0.3 * np.cos(angle)
    jitter = rng.normal(0, 0.04, size=(len(labels), 2))
    py = cy[labels][:, None, None] + jitter[:, 0, None, None]
    px = cx[labels][:, None, None] + jitter[:, 1, None, None]
    img = 0.8 * np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * 0.12**2))
    img = img[:, None] + rng.normal(0, 0.08, size=(len(labels), c, h, w))
    return img + 0.1


def _rings(labels, classes, shape, rng):
    c, h, w = shape
    yy, xx = _grid(h, w)
    radius = 0.08 + 0.32 * np.arange(classes) / max(classes - 1, 1)
    centre = 0.5 + rng.normal(0, 0.03, size=(len(labels), 2))
    r = np.sqrt((yy - centre[:, 0, None, None]) ** 2 + (xx - centre[:, 1, None, None]) ** 2)
    img = 0.7 * np.exp(-((r - radius[labels][:, None, None]) ** 2) / (2 * 0.05**2))
    return img[:, None] + 0.15 + rng.normal(0, 0.08, size=(len(labels), c, h, w))


# faint gratings: strong enough for every family to learn, weak enough that an
# eps=16/255 perturbation can overwrite them
TEXTURE_AMPLITUDE = 0.12
TEXTURE_NOISE = 0.08


def _textures(labels, classes, shape, rng):
    # class -> (orientation, spatial frequency) of a grating with random phase
    c, h, w = shape
    yy, xx = _grid(h, w)
    n_orient = max(classes // 2, 1)
    orient = np.pi * (labels % n_orient) / n_orient + rng.normal(0, 0.05, len(labels))
    freq = np.where(labels // n_orient % 2 == 0, 2.0, 4.0) + rng.normal(0, 0.1, len(labels))
    phase = rng.uniform(0, 2 * np.pi, len(labels))
    u = xx[None] * np.cos(orient)[:, None, None] + yy[None] * np.sin(orient)[:, None, None]
    img = 0.5 + TEXTURE_AMPLITUDE * np.sin(2 * np.pi * freq[:, None, None] * u + phase[:, None, None])
    return img[:, None] + rng.normal(0, TEXTURE_NOISE, size=(len(labels), c, h, w))


_GENERATORS = {"blobs": _blobs, "rings": _rings, "textures": _textures}


def generate(kind: str = DEFAULT_KIND, n: int = DEFAULT_N, classes: int = DEFAULT_CLASSES,
             shape=DEFAULT_SHAPE, seed: int = 0, test_fraction: float = 0.25) -> Dataset:
    """Class-balanced synthetic dataset; identical output for identical arguments."""
    if kind not in KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    shape = tuple(int(d) for d in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"shape must be (channels, height, width) with positive sizes, got {shape}")
    if classes < 2 or n < classes:
        raise ConfigError(f"cannot balance {n} samples over {classes} classes")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(int(seed))
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    inputs = np.clip(_GENERATORS[kind](labels, classes, shape, rng), 0.0, 1.0)
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return Dataset(
        np.ascontiguousarray(inputs, dtype=np.float64),
        labels,
        np.sort(order[n_test:]),
        np.sort(order[:n_test]),
        classes,
        int(seed),
        kind,
    )


def from_description(desc: dict) -> Dataset:
    """Regenerate a dataset from :meth:`Dataset.describe` output."""
    return generate(desc["source"], desc["n"], desc["classes"], desc["shape"], desc["seed"])


# ---------------------------------------------------------------------------
# IDX files (big-endian header, unsigned byte payload)


def _read_idx(data: bytes, magic: int, ndims: int, what: str):
    header = 4 + 4 * ndims
    if len(data) < 4:
        raise FormatError(f"{what}: truncated before magic ({len(data)} bytes)", len(data))
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(data) < header:
        raise FormatError(f"{what}: truncated header ({len(data)} of {header} bytes)", len(data))
    dims = struct.unpack(f">{ndims}I", data[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < need:
        raise FormatError(
            f"{what}: truncated payload, expected {need} bytes, found {len(data) - header}", len(data)
        )
    if len(data) - header > need:
        raise FormatError(f"{what}: {len(data) - header - need} trailing bytes", header + need)
    return dims, np.frombuffer(data, dtype=np.uint8, count=need, offset=header)


def load_idx(images_path, labels_path, classes: int | None = None, test_fraction: float = 0.25,
             seed: int = 0) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255 into [0, 1].

    The train/test split is a seeded permutation of the file order.
    """
    (count, rows, cols), pixels = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, 3, "images")
    (n_labels,), labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, 1, "labels")
    if count != n_labels:
        raise FormatError(f"count mismatch: {count} images but {n_labels} labels", 4)
    inputs = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if count else 0
    order = np.random.default_rng(int(seed)).permutation(count)
    n_test = int(round(count * test_fraction))
    return Dataset(
        inputs,
        labels,
        np.sort(order[n_test:]),
        np.sort(order[:n_test]),
        classes,
        int(seed),
        f"idx:{Path(images_path).name}",
    )


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [N, rows, cols] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# evaluation sets


@dataclass(frozen=True, eq=False)
class EvalSet:
    dataset: Dataset
    indices: np.ndarray

    @property
    def inputs(self) -> np.ndarray:
        return self.dataset.inputs[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]

    def __len__(self) -> int:
        return len(self.indices)


def qualifying_indices(dataset: Dataset, models) -> np.ndarray:
    """Test-split indices classified correctly by every model."""
    idx = dataset.test_idx
    x, y = dataset.inputs[idx], dataset.labels[idx]
    ok = np.ones(len(idx), dtype=bool)
    for m in models:
        ok &= m.predict(x) == y
    return idx[ok]


def build_eval_set(dataset: Dataset, pool, n: int, seed: int) -> EvalSet:
    """``n`` test samples drawn uniformly without replacement from those all pool models get right."""
    if len(dataset.test_idx) == 0:
        raise ConfigError("dataset has an empty test split")
    models = pool.all_models if hasattr(pool, "all_models") else list(pool)
    good = qualifying_indices(dataset, models)
    if n > len(good):
        raise EvalSetError(n, len(good))
    chosen = np.sort(np.random.default_rng(int(seed)).choice(good, size=n, replace=False))
    ev = EvalSet(dataset, chosen)
    # independent re-check of the construction
    for m in models:
        pred = m.logits(ev.inputs).argmax(axis=1)
        assert np.array_equal(pred, ev.labels), f"eval set check failed for {m.name}"
    return ev
