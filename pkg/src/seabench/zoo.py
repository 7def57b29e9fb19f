"""Small classifier families, training, the weight-file format, and model pools."""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, TrainingError, VersionError
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

FAMILIES = ("mlp", "cnn-small", "cnn-wide", "cnn-deep")
MAX_VARIANT = 6

MAGIC = b"SEAM"
FORMAT_VERSION = 1

ADMISSION_THRESHOLD = 0.85
GRAD_CLIP = 1.0


@dataclass(frozen=True)
class ArchSpec:
    family: str
    variant: int
    input_shape: tuple[int, int, int] = (1, 16, 16)
    classes: int = 8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if not 1 <= int(self.variant) <= MAX_VARIANT:
            raise ConfigError(f"variant {self.variant} of {self.family} outside 1..{MAX_VARIANT}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1 or self.classes < 2:
            raise ConfigError(f"bad input shape {self.input_shape} / classes {self.classes}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    @property
    def name(self) -> str:
        return f"{self.family}-{self.variant}"

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["family"], int(d["variant"]), tuple(d["input_shape"]), int(d["classes"]))


def _layout(spec: ArchSpec):
    """Build the graph and list parameter shapes as (name, shape, fan_in)."""
    c, h, w = spec.input_shape
    v = spec.variant
    g = Graph()
    shapes: list[tuple[str, tuple, int]] = []

    def p(name, shape, fan_in):
        shapes.append((name, tuple(shape), fan_in))
        return g.param(name)

    def dense(x, n_in, n_out, tag):
        return g.add_bias(g.matmul(x, p(f"{tag}.w", (n_in, n_out), n_in)), p(f"{tag}.b", (n_out,), 0))

    def conv(x, c_in, c_out, k, tag):
        y = g.conv2d(x, p(f"{tag}.w", (c_out, c_in, k, k), c_in * k * k), pad=k // 2)
        return g.add_bias(y, p(f"{tag}.b", (c_out,), 0))

    x = g.input("x")
    if spec.family == "mlp":
        width = 48 + 16 * v
        depth = 2 if v <= 3 else 3
        hcur, n = g.flatten(x), c * h * w
        for i in range(depth):
            hcur, n = g.relu(dense(hcur, n, width, f"fc{i}")), width
        logits = dense(hcur, n, spec.classes, "out")
    elif spec.family == "cnn-small":
        c1 = 4 + v
        y = g.maxpool(g.relu(conv(x, c, c1, 3, "conv0")), 2)
        y = g.maxpool(g.relu(conv(y, c1, 2 * c1, 3, "conv1")), 2)
        logits = dense(g.flatten(y), 2 * c1 * (h // 4) * (w // 4), spec.classes, "out")
    elif spec.family == "cnn-wide":
        c1 = 8 + 2 * v
        y = g.maxpool(g.relu(conv(x, c, c1, 5, "conv0")), 4)
        y = g.relu(dense(g.flatten(y), c1 * (h // 4) * (w // 4), 32, "fc0"))
        logits = dense(y, 32, spec.classes, "out")
    else:  # cnn-deep
        c1 = 4 + v
        y = g.relu(conv(x, c, c1, 3, "conv0"))
        y = g.maxpool(g.relu(conv(y, c1, c1, 3, "conv1")), 2)
        y = g.relu(conv(y, c1, 2 * c1, 3, "conv2"))
        y = g.maxpool(g.relu(conv(y, 2 * c1, 2 * c1, 3, "conv3")), 2)
        logits = dense(g.flatten(y), 2 * c1 * (h // 4) * (w // 4), spec.classes, "out")
    labels = g.input("labels")
    loss = g.softmax_cross_entropy(logits, labels)
    return g, logits, loss, shapes


@dataclass
class Model:
    spec: ArchSpec
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.graph, self._logits, self._loss, shapes = _layout(self.spec)
        for name, shape, _ in shapes:
            if name not in self.params:
                raise ContractError(f"{self.name}: missing parameter {name}")
            if self.params[name].shape != shape:
                raise ContractError(f"{self.name}: parameter {name} has shape {self.params[name].shape}, expected {shape}")
        self.param_names = [name for name, _, _ in shapes]

    @property
    def name(self) -> str:
        return self.spec.name

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def logits(self, x: Tensor) -> Tensor:
        return self.graph.forward({"x": x, **self.params}, output=self._logits)

    def input_grad(self, dlogits: Tensor) -> Tensor:
        """Backprop ``dlogits`` through the most recent :meth:`logits` call."""
        return self.graph.backward(dlogits, wrt=("x",))["x"]

    def predict(self, x: Tensor, batch: int = 512) -> np.ndarray:
        return np.concatenate([self.logits(x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)])

    def accuracy(self, x: Tensor, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))

    def loss_and_param_grads(self, x: Tensor, y: np.ndarray):
        loss = self.graph.forward({"x": x, "labels": y, **self.params}, output=self._loss)
        grads = self.graph.backward(1.0, wrt=self.param_names)
        return float(loss), grads

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names])

    def same_params(self, other: "Model") -> bool:
        return (
            self.spec == other.spec
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def build(spec: ArchSpec, init_seed: int) -> Model:
    """Untrained model with He-normal weights (fan-in scaling) and zero biases."""
    _, _, _, shapes = _layout(spec)
    rng = np.random.default_rng([int(init_seed), FAMILIES.index(spec.family), spec.variant])
    params = {}
    for name, shape, fan_in in shapes:
        if fan_in == 0:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Model(spec, params, {"init_seed": int(init_seed)})


def train(model: Model, dataset, epochs: int, lr: float, train_seed: int, batch_size: int = 64,
          clip: float | None = GRAD_CLIP) -> Model:
    """SGD with momentum 0.9; lr is cut by 10x at 50% and again at 75% of the epochs.

    Each minibatch gradient is rescaled to global L2 norm at most ``clip``;
    without it the deeper conv nets sometimes stall at chance level.

    Returns a new Model; the input model is left untouched.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if clip is not None and clip <= 0:
        raise ConfigError(f"gradient clip must be positive, got {clip}")
    if tuple(dataset.inputs.shape[1:]) != model.spec.input_shape:
        raise ConfigError(f"dataset input shape {dataset.inputs.shape[1:]} does not match {model.spec.input_shape}")
    params = {k: v.copy() for k, v in model.params.items()}
    trained = Model(model.spec, params, dict(model.meta))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(int(train_seed))
    x_tr, y_tr = dataset.train_split()
    milestones = {int(epochs * 0.5), int(epochs * 0.75)}
    rate = lr
    for epoch in range(epochs):
        if epoch in milestones and epoch > 0:
            rate *= 0.1
        order = rng.permutation(len(y_tr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = trained.loss_and_param_grads(x_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"{model.name}: loss diverged (non-finite) in epoch {epoch}")
            total += loss * len(idx)
            if clip is not None:
                norm = np.sqrt(sum(float(np.sum(gk * gk)) for gk in grads.values()))
                if norm > clip:
                    grads = {k: gk * (clip / norm) for k, gk in grads.items()}
            for k, gk in grads.items():
                velocity[k] *= 0.9
                velocity[k] += gk
                params[k] -= rate * velocity[k]
        log.debug("%s epoch %d loss %.4f", model.name, epoch, total / len(order))
    x_te, y_te = dataset.test_split()
    trained.meta = {
        **model.meta,
        "dataset": dataset.ident,
        "epochs": int(epochs),
        "lr": float(lr),
        "train_seed": int(train_seed),
        "recipe": f"sgd momentum=0.9 batch={batch_size} clip={clip} step-decay 0.1@50%,75%",
        "train_accuracy": trained.accuracy(x_tr, y_tr) if epochs else None,
        "test_accuracy": trained.accuracy(x_te, y_te) if len(y_te) else None,
    }
    return trained


# ---------------------------------------------------------------------------
# weight files


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    desc = json.dumps({"arch": model.spec.to_dict(), "meta": model.meta}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(model.param_names)))
    for name in model.param_names:
        arr = model.params[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes for {what}, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(data: bytes) -> Model:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION, 4)
    start = r.pos
    try:
        desc = json.loads(r.take(r.u32("descriptor length"), "descriptor").decode("utf-8"))
        spec = ArchSpec.from_dict(desc["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"unreadable architecture descriptor: {exc}", start) from None
    params = {}
    for _ in range(r.u32("parameter count")):
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims))
        payload = r.take(8 * count, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last parameter", r.pos)
    try:
        return Model(spec, params, desc.get("meta", {}))
    except ContractError as exc:
        raise FormatError(str(exc), r.pos) from None


def save(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model))
    os.replace(tmp, path)


def load(path) -> Model:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# pools


@dataclass
class ModelPool:
    surrogates: list[Model]
    targets: list[Model] = field(default_factory=list)

    def __post_init__(self):
        if not self.surrogates:
            raise ContractError("a pool needs at least one surrogate")
        names = [m.spec for m in self.surrogates]
        if len(set(names)) != len(names):
            raise ContractError("duplicate (family, variant) among surrogates")
        overlap = {m.spec for m in self.surrogates} & {m.spec for m in self.targets}
        if overlap or any(t is s for t in self.targets for s in self.surrogates):
            raise ContractError(f"surrogates and targets overlap: {sorted(s.name for s in overlap)}")
        first = self.surrogates[0].spec
        for m in self.surrogates + self.targets:
            if m.spec.input_shape != first.input_shape or m.spec.classes != first.classes:
                raise ContractError(f"{m.name} does not share input shape/classes with {first.name}")

    @property
    def s(self) -> int:
        return len(self.surrogates)

    @property
    def all_models(self) -> list[Model]:
        return self.surrogates + self.targets

    def subset(self, indices) -> "ModelPool":
        return ModelPool([self.surrogates[i] for i in indices], list(self.targets))

    def by_family(self, family: str) -> list[int]:
        return [i for i, m in enumerate(self.surrogates) if m.spec.family == family]


def default_specs(input_shape=(1, 16, 16), classes=8):
    """20 surrogates (families interleaved, variants 1-5) and 4 targets (variant 6)."""
    surrogates = [ArchSpec(f, v, input_shape, classes) for v in range(1, 6) for f in FAMILIES]
    targets = [ArchSpec(f, MAX_VARIANT, input_shape, classes) for f in FAMILIES]
    return surrogates, targets


def check_admission(models, x: Tensor, y: np.ndarray, threshold: float = ADMISSION_THRESHOLD) -> dict[str, float]:
    accs = {m.name: m.accuracy(x, y) for m in models}
    low = {k: v for k, v in accs.items() if v < threshold}
    if low:
        raise TrainingError(f"models below admission threshold {threshold}: {low}")
    return accs


def train_pool(dataset, surrogate_specs, target_specs, *, epochs=20, lr=0.05, seed=0,
               threshold=ADMISSION_THRESHOLD, out_dir=None) -> ModelPool:
    """Build and train every model, check admission, optionally write a pool directory."""
    def make(spec, k):
        return train(build(spec, seed + k), dataset, epochs, lr, seed + 1000 + k)

    specs = list(surrogate_specs) + list(target_specs)
    models = []
    for k, spec in enumerate(specs):
        m = make(spec, k)
        log.info("trained %s: test accuracy %.3f", m.name, m.meta["test_accuracy"])
        models.append(m)
    pool = ModelPool(models[: len(surrogate_specs)], models[len(surrogate_specs) :])
    x_te, y_te = dataset.test_split()
    check_admission(pool.all_models, x_te, y_te, threshold)
    if out_dir is not None:
        save_pool(pool, out_dir, dataset_meta=dataset.describe())
    return pool


def save_pool(pool: ModelPool, out_dir, dataset_meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m in pool.all_models:
        save(m, out / f"{m.name}.seam")
    manifest = {
        "surrogates": [f"{m.name}.seam" for m in pool.surrogates],
        "targets": [f"{m.name}.seam" for m in pool.targets],
        "dataset": dataset_meta or {},
    }
    tmp = out / "pool.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "pool.json")


def load_pool(pool_dir) -> tuple[ModelPool, dict]:
    pool_dir = Path(pool_dir)
    manifest = json.loads((pool_dir / "pool.json").read_text())
    pool = ModelPool(
        [load(pool_dir / f) for f in manifest["surrogates"]],
        [load(pool_dir / f) for f in manifest["targets"]],
    )
    return pool, manifest.get("dataset", {})
