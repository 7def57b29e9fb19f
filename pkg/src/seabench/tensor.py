"""Small reverse-mode differentiation engine over float64 numpy arrays.

A :class:`Graph` is an ordered list of primitive nodes. Leaves are named
inputs and parameters; every other node records the indices of its parents,
which always precede it. ``forward`` evaluates the nodes in order and keeps
the intermediate values; ``backward`` walks the same list in reverse and
returns gradients for the requested leaves.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (labels are
int64). Broadcasting is only used by ``add_bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError

Tensor = np.ndarray


def tensor(data, shape=None) -> Tensor:
    """Return ``data`` as a contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| |b|) over flattened tensors; 0.0 if either is all zeros."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def batch_cosine(a: Tensor, b: Tensor) -> np.ndarray:
    """Per-sample cosine similarity along axis 0, with the zero-vector rule."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape != b.shape:
        raise ShapeError(f"batch_cosine: shapes {a.shape} and {b.shape} differ")
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    num = np.einsum("ij,ij->i", a, b)
    out = np.zeros(a.shape[0])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# kernels shared with the attack transforms


def conv2d_forward(x: Tensor, w: Tensor, pad: int) -> Tensor:
    """Stride-1 cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,kh,kw]."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(dout: Tensor, w: Tensor, pad: int) -> Tensor:
    kh = w.shape[2]
    flipped = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d_forward(dout, flipped, kh - 1 - pad)


def conv2d_backward_weight(x: Tensor, dout: Tensor, kshape, pad: int) -> Tensor:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, kshape, axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    return np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw


def log_softmax(z: Tensor) -> Tensor:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    parents: tuple[int, ...] = ()
    name: str | None = None
    attrs: dict = field(default_factory=dict)


class Graph:
    """Ordered list of primitive ops.

    Builder methods append a node and return its index::

        g = Graph()
        x = g.input("x")
        h = g.relu(g.add_bias(g.matmul(x, g.param("w")), g.param("b")))
        g.forward({"x": ..., "w": ..., "b": ...}, output=h)
    """

    LEAVES = ("input", "param")

    def __init__(self):
        self.nodes: list[Node] = []
        self._values: list | None = None
        self._cache: dict[int, object] = {}
        self._output: int | None = None

    # -- construction -----------------------------------------------------

    def _add(self, op, parents=(), name=None, **attrs) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ShapeError(f"{op}: parent index {p} does not precede node {len(self.nodes)}")
        self.nodes.append(Node(op, tuple(parents), name, attrs))
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        return self._add("input", name=name)

    def param(self, name: str) -> int:
        return self._add("param", name=name)

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def conv2d(self, x: int, w: int, pad: int = 0) -> int:
        return self._add("conv2d", (x, w), pad=int(pad))

    def add_bias(self, x: int, b: int) -> int:
        return self._add("add_bias", (x, b))

    def relu(self, x: int) -> int:
        return self._add("relu", (x,))

    def maxpool(self, x: int, size: int = 2) -> int:
        return self._add("maxpool", (x,), size=int(size))

    def mean(self, x: int, axes=(2, 3)) -> int:
        return self._add("mean", (x,), axes=tuple(axes))

    def flatten(self, x: int) -> int:
        return self._add("flatten", (x,))

    def softmax_cross_entropy(self, logits: int, labels: int) -> int:
        """Mean cross-entropy over the batch; ``labels`` is an int input node."""
        return self._add("softmax_ce", (logits, labels))

    def leaf_names(self, op=None) -> list[str]:
        return [n.name for n in self.nodes if n.op in self.LEAVES and (op is None or n.op == op)]

    # -- evaluation -------------------------------------------------------

    def forward(self, inputs: Mapping[str, Tensor], output: int | None = None) -> Tensor:
        """Evaluate nodes ``0..output`` (default: last node) and cache intermediates."""
        if output is None:
            output = len(self.nodes) - 1
        values: list = [None] * (output + 1)
        cache: dict[int, object] = {}
        for i in range(output + 1):
            node = self.nodes[i]
            if node.op in self.LEAVES:
                if node.name not in inputs:
                    raise ShapeError(f"{node.op} '{node.name}' is not bound")
                values[i] = inputs[node.name]
                continue
            args = [values[p] for p in node.parents]
            values[i] = self._eval(i, node, args, cache)
        self._values = values
        self._cache = cache
        self._output = output
        return values[output]

    def _eval(self, i, node, args, cache):
        op = node.op
        if op == "matmul":
            a, b = args
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
            return a @ b
        if op == "conv2d":
            x, w = args
            if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
                raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
            pad = node.attrs["pad"]
            if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
                raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
            return conv2d_forward(x, w, pad)
        if op == "add_bias":
            x, b = args
            if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
                raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
            return x + b.reshape((1, -1) + (1,) * (x.ndim - 2))
        if op == "relu":
            return np.maximum(args[0], 0.0)
        if op == "maxpool":
            x = args[0]
            k = node.attrs["size"]
            if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
                raise ShapeError(f"maxpool: window {k} does not fit input {x.shape}")
            n, c, h, w = x.shape
            ho, wo = h // k, w // k
            blocks = (
                x[:, :, : ho * k, : wo * k]
                .reshape(n, c, ho, k, wo, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, ho, wo, k * k)
            )
            idx = blocks.argmax(axis=-1)
            cache[i] = idx
            return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        if op == "mean":
            return args[0].mean(axis=node.attrs["axes"])
        if op == "flatten":
            return args[0].reshape(args[0].shape[0], -1)
        if op == "softmax_ce":
            z, y = args
            if z.ndim != 2 or y.shape != (z.shape[0],):
                raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
            logp = log_softmax(z)
            cache[i] = logp
            return np.float64(-logp[np.arange(z.shape[0]), y].mean())
        raise ShapeError(f"unknown op {op}")

    def activation_pattern(self) -> np.ndarray:
        """Per-sample record of which linear piece the last forward landed on.

        Row k concatenates, for sample k, the sign of every relu input and the
        winning index of every maxpool window. Two inputs with equal rows lie
        on the same smooth piece of the network.
        """
        if self._values is None:
            raise StateError("activation_pattern called before forward")
        parts = []
        for i, node in enumerate(self.nodes[: self._output + 1]):
            if node.op == "relu":
                v = self._values[node.parents[0]]
                parts.append((v > 0).reshape(v.shape[0], -1).astype(np.int64))
            elif node.op == "maxpool":
                idx = self._cache[i]
                parts.append(idx.reshape(idx.shape[0], -1).astype(np.int64))
        if not parts:
            return np.zeros((0, 0), dtype=np.int64)
        return np.concatenate(parts, axis=1)

    def backward(self, seed=1.0, wrt: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Propagate ``seed`` (d out / d output) back; return gradients of leaves.

        ``wrt`` restricts the computation to the named leaves; by default all
        params and float inputs are differentiated.
        """
        if self._values is None:
            raise StateError("backward called before forward")
        values, out = self._values, self._output
        want = set(wrt) if wrt is not None else None
        needs = [False] * (out + 1)
        for i in range(out + 1):
            node = self.nodes[i]
            if node.op in self.LEAVES:
                floating = np.issubdtype(np.asarray(values[i]).dtype, np.floating)
                needs[i] = floating and (want is None or node.name in want)
            else:
                needs[i] = any(needs[p] for p in node.parents)
        grads: list = [None] * (out + 1)
        grads[out] = np.broadcast_to(np.asarray(seed, dtype=np.float64), np.shape(values[out])).copy()
        for i in range(out, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.op in self.LEAVES or not needs[i]:
                continue
            for p, gp in zip(node.parents, self._grad(i, node, g, needs)):
                if gp is None or not needs[p]:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        result = {}
        for i in range(out + 1):
            node = self.nodes[i]
            if node.op in self.LEAVES and needs[i]:
                g = grads[i]
                result[node.name] = np.zeros_like(values[i], dtype=np.float64) if g is None else g
        return result

    def _grad(self, i, node, g, needs):
        op = node.op
        vals = [self._values[p] for p in node.parents]
        want = [needs[p] for p in node.parents]
        if op == "matmul":
            a, b = vals
            return (g @ b.T if want[0] else None, a.T @ g if want[1] else None)
        if op == "conv2d":
            x, w = vals
            pad = node.attrs["pad"]
            return (
                conv2d_backward_input(g, w, pad) if want[0] else None,
                conv2d_backward_weight(x, g, w.shape[2:], pad) if want[1] else None,
            )
        if op == "add_bias":
            axes = (0,) + tuple(range(2, g.ndim))
            return (g, g.sum(axis=axes) if want[1] else None)
        if op == "relu":
            return (g * (vals[0] > 0.0),)
        if op == "maxpool":
            x = vals[0]
            k = node.attrs["size"]
            n, c, h, w = x.shape
            ho, wo = h // k, w // k
            blocks = np.zeros((n, c, ho, wo, k * k))
            np.put_along_axis(blocks, self._cache[i][..., None], g[..., None], axis=-1)
            dx = np.zeros_like(x)
            dx[:, :, : ho * k, : wo * k] = (
                blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
            )
            return (dx,)
        if op == "mean":
            x = vals[0]
            axes = node.attrs["axes"]
            count = int(np.prod([x.shape[a] for a in axes]))
            return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)
        if op == "flatten":
            return (g.reshape(vals[0].shape),)
        if op == "softmax_ce":
            z, y = vals
            d = np.exp(self._cache[i])
            d[np.arange(z.shape[0]), y] -= 1.0
            return (d * (g / z.shape[0]), None)
        raise ShapeError(f"unknown op {op}")
