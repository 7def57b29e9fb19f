"""Iterative L-infinity ensemble attack with MI/NI/DI/TI/SI transfer baselines.

One iteration, in order:

1. ask the selector which surrogates to use;
2. pick the gradient point (x_adv, or the Nesterov look-ahead for NI);
3. for each scale copy (SI) apply the random input transform (DI);
4. fuse the selected models and backprop to the input;
5. smooth the averaged gradient (TI);
6. momentum update with per-sample L1 normalisation, signed step,
   projection onto the eps-ball and clamp to [0, 1].

Momentum persists across iterations even when the selected models change.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .selection import SelectionConfig, Selector
from .tensor import Tensor, conv2d_forward, log_softmax

LOGIT = "logit"
LOSS = "loss"
FUSIONS = (LOGIT, LOSS)

COMPONENTS = ("MI", "NI", "DI", "TI", "SI")
DEFAULT_DI_PROB = 0.5
DEFAULT_TI_KERNEL = 7
DEFAULT_SI_COPIES = 5
DI_RESIZE = 1.15


def parse_baseline(name: str) -> frozenset[str]:
    """``"none"``, a single component like ``"MI"``, or a stack like ``"DI-TI"``."""
    key = name.strip()
    if key.lower() == "none":
        return frozenset()
    parts = [p.strip().upper() for p in key.split("-") if p.strip()]
    bad = [p for p in parts if p not in COMPONENTS]
    if bad or not parts:
        raise ConfigError(f"unknown baseline {name!r}; components are none, {', '.join(COMPONENTS)}")
    return frozenset(parts)


def fuse_name(name: str) -> str:
    key = name.strip().lower().replace("-avg", "").replace("_avg", "")
    if key not in FUSIONS:
        raise ConfigError(f"unknown fusion {name!r}; expected logit-avg or loss-avg")
    return key


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    iterations: int = 10
    alpha: float | None = None  # None -> epsilon / iterations
    mu: float = 1.0
    fusion: str = LOGIT
    baseline: str = "MI"
    di_prob: float | None = None
    ti_kernel: int | None = None
    si_copies: int | None = None
    targeted: bool = False
    transform_seed: int = 0
    record_gradients: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        object.__setattr__(self, "fusion", fuse_name(self.fusion))
        parts = parse_baseline(self.baseline)
        for comp, attr, default in (("DI", "di_prob", DEFAULT_DI_PROB),
                                    ("TI", "ti_kernel", DEFAULT_TI_KERNEL),
                                    ("SI", "si_copies", DEFAULT_SI_COPIES)):
            if comp in parts and getattr(self, attr) is None:
                object.__setattr__(self, attr, default)
            elif comp not in parts and getattr(self, attr) is not None:
                raise ConfigError(f"{attr} given but baseline {self.baseline!r} does not use {comp}")
        if self.di_prob is not None and not 0.0 <= self.di_prob <= 1.0:
            raise ConfigError(f"DI probability must be in [0, 1], got {self.di_prob}")
        if self.ti_kernel is not None and (self.ti_kernel < 1 or self.ti_kernel % 2 == 0):
            raise ConfigError(f"TI kernel length must be a positive odd integer, got {self.ti_kernel}")
        if self.si_copies is not None and self.si_copies < 1:
            raise ConfigError(f"SI copies must be >= 1, got {self.si_copies}")

    @property
    def step(self) -> float:
        return self.epsilon / self.iterations if self.alpha is None else self.alpha

    @property
    def components(self) -> frozenset[str]:
        return parse_baseline(self.baseline)

    @property
    def copies(self) -> int:
        """Forward/backward passes per selected model per iteration."""
        return self.si_copies if self.si_copies is not None else 1


def target_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    return (np.asarray(labels) + 1) % classes


# ---------------------------------------------------------------------------
# fusion


class Counters:
    def __init__(self):
        self.forward = Counter()
        self.backward = Counter()

    def total_forward(self) -> int:
        return sum(self.forward.values())

    def total_backward(self) -> int:
        return sum(self.backward.values())


def _ce_and_grad(logits: Tensor, y: np.ndarray, targeted: bool):
    """Objective to maximise and its gradient w.r.t. logits (mean over batch)."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    loss = -logp[np.arange(n), y].mean()
    d /= n
    if targeted:
        return -loss, -d
    return loss, d


def fuse(models, x: Tensor, y: np.ndarray, mode: str = LOGIT, targeted: bool = False,
         counters: Counters | None = None, per_model: bool = False):
    """Fused objective and its input gradient.

    logit mode: J(mean_i l_i(x), y); loss mode: mean_i J(l_i(x), y). With
    ``targeted`` the objective is -J towards ``y``, so ascent moves towards it.
    Returns ``(loss, grad)`` or, with ``per_model``, ``(loss, grad, grads)`` where
    ``grads[i]`` is the input gradient of model i's own objective.
    """
    if not models:
        raise ContractError("fuse needs at least one model")
    mode = fuse_name(mode)
    m = len(models)
    logits = []
    for model in models:
        logits.append(model.logits(x))
        if counters is not None:
            counters.forward[model.name] += 1
    if mode == LOGIT:
        loss, dbar = _ce_and_grad(sum(logits) / m, y, targeted)
        seeds = [dbar / m] * m
    else:
        parts = [_ce_and_grad(l, y, targeted) for l in logits]
        loss = sum(p[0] for p in parts) / m
        seeds = [p[1] / m for p in parts]
    grad = np.zeros_like(x)
    own = []
    # a model listed twice was evaluated on the same x, so its cached forward is still valid
    for model, logit, seed in zip(models, logits, seeds):
        grad += model.input_grad(seed)
        if counters is not None:
            counters.backward[model.name] += 1
        if per_model:
            own.append(model.input_grad(_ce_and_grad(logit, y, targeted)[1]))
    if per_model:
        return float(loss), grad, own
    return float(loss), grad


# ---------------------------------------------------------------------------
# transfer baselines


def di_params(shape, p: float, rng: np.random.Generator):
    """Draw one DI transform: None (identity) or (rh, rw, top, left).

    With probability p the image is nearest-resized to rh x rw with rh in
    [H, ceil(1.15 H)], zero-padded at offset (top, left) onto a
    ceil(1.15 H) x ceil(1.15 W) canvas, and nearest-resized back to H x W.
    """
    h, w = shape[-2:]
    if rng.random() >= p:
        return None
    ch, cw = math.ceil(DI_RESIZE * h), math.ceil(DI_RESIZE * w)
    rh, rw = int(rng.integers(h, ch + 1)), int(rng.integers(w, cw + 1))
    top, left = int(rng.integers(0, ch - rh + 1)), int(rng.integers(0, cw - rw + 1))
    return rh, rw, top, left


def _nearest_axis(n: int, canvas: int, r: int, off: int) -> np.ndarray:
    """Source index along one axis for each output position, -1 where padding shows."""
    src = np.full(n, -1)
    for i in range(n):
        c = (i * canvas) // n
        if off <= c < off + r:
            src[i] = ((c - off) * n) // r
    return src


def di_gather(shape, params) -> np.ndarray | None:
    """The DI transform for fixed ``params`` as a 0/1 matrix [H*W, H*W]."""
    if params is None:
        return None
    h, w = shape[-2:]
    rh, rw, top, left = params
    rows = _nearest_axis(h, math.ceil(DI_RESIZE * h), rh, top)
    cols = _nearest_axis(w, math.ceil(DI_RESIZE * w), rw, left)
    mat = np.zeros((h * w, h * w))
    for i in np.flatnonzero(rows >= 0):
        for j in np.flatnonzero(cols >= 0):
            mat[i * w + j, rows[i] * w + cols[j]] = 1.0
    return mat


def di_matrix(shape, p: float, rng: np.random.Generator):
    return di_gather(shape, di_params(shape, p, rng))


def apply_gather(x: Tensor, mat) -> Tensor:
    if mat is None:
        return x
    n, c, h, w = x.shape
    return (x.reshape(n * c, h * w) @ mat.T).reshape(x.shape)


def gather_backward(g: Tensor, mat) -> Tensor:
    if mat is None:
        return g
    n, c, h, w = g.shape
    return (g.reshape(n * c, h * w) @ mat).reshape(g.shape)


def transform_DI(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"DI probability must be in [0, 1], got {p}")
    return apply_gather(x, di_matrix(x.shape, p, rng))


def triangle_kernel(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"TI kernel length must be a positive odd integer, got {k}")
    c = (k - 1) / 2
    t = 1.0 - np.abs(np.arange(k) - c) / (c + 1)
    kern = np.outer(t, t)
    return kern / kern.sum()


def smooth_TI(grad: Tensor, k: int) -> Tensor:
    """Depthwise zero-padded convolution with a normalised k x k triangle kernel."""
    kern = triangle_kernel(k)
    n, c, h, w = grad.shape
    if k > h or k > w:
        raise ConfigError(f"TI kernel length {k} exceeds input size {h}x{w}")
    if k == 1:
        return grad.copy()
    out = conv2d_forward(grad.reshape(n * c, 1, h, w), kern[None, None], k // 2)
    return out.reshape(grad.shape)


def grads_SI(models, x: Tensor, y: np.ndarray, N: int, mode: str = LOGIT, targeted: bool = False,
             counters: Counters | None = None) -> Tensor:
    """Mean over i < N of the fused input gradient of x / 2**i (chain rule included)."""
    if N < 1:
        raise ConfigError(f"SI copies must be >= 1, got {N}")
    total = np.zeros_like(x)
    for i in range(N):
        scale = 0.5**i
        total += scale * fuse(models, x * scale, y, mode, targeted, counters)[1]
    return total / N


def l1_normalise(g: Tensor) -> Tensor:
    norms = np.abs(g).reshape(g.shape[0], -1).sum(axis=1)
    out = np.zeros_like(g)
    ok = norms > 0
    out[ok] = g[ok] / norms[ok].reshape((-1,) + (1,) * (g.ndim - 1))
    return out


def project(x_adv: Tensor, x: Tensor, epsilon: float) -> Tensor:
    """Clip to the eps-ball around x, then to the [0, 1] box."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


@dataclass
class AttackState:
    x: Tensor
    x_adv: Tensor
    g: Tensor
    t: int = 0
    counters: Counters = field(default_factory=Counters)


def step_MI(state: AttackState, grad: Tensor, mu: float, alpha: float, epsilon: float) -> AttackState:
    """g <- mu g + grad / |grad|_1 (per sample); x_adv <- clip(x_adv + alpha sign(g)).

    A sample whose gradient is all zeros keeps only the decayed momentum.
    """
    state.g = mu * state.g + l1_normalise(grad)
    state.x_adv = project(state.x_adv + alpha * np.sign(state.g), state.x, epsilon)
    state.t += 1
    return state


def lookahead_NI(state: AttackState, mu: float, alpha: float) -> Tensor:
    return state.x_adv + alpha * mu * state.g


def step_NI(state: AttackState, models, y, mu: float, alpha: float, epsilon: float,
            mode: str = LOGIT, targeted: bool = False) -> AttackState:
    grad = fuse(models, lookahead_NI(state, mu, alpha), y, mode, targeted, state.counters)[1]
    return step_MI(state, grad, mu, alpha, epsilon)


# ---------------------------------------------------------------------------
# full loop


@dataclass
class AttackTrace:
    selections: list[list[int]] = field(default_factory=list)
    model_names: list[str] = field(default_factory=list)
    forward_counts: dict[str, int] = field(default_factory=dict)
    backward_counts: dict[str, int] = field(default_factory=dict)
    forward_per_iteration: list[int] = field(default_factory=list)
    linf: list[float] = field(default_factory=list)
    box: list[tuple[float, float]] = field(default_factory=list)
    lookahead_linf: list[float] = field(default_factory=list)
    # per iteration: array [m, N, C, H, W] of each selected model's own raw gradient
    gradients: list[np.ndarray] = field(default_factory=list)

    @property
    def total_forward(self) -> int:
        return sum(self.forward_counts.values())

    @property
    def total_backward(self) -> int:
        return sum(self.backward_counts.values())

    @property
    def n_distinct(self) -> int:
        return len(set().union(*self.selections)) if self.selections else 0


@dataclass
class AttackResult:
    adv: Tensor
    trace: AttackTrace


def run_attack(surrogates, x: Tensor, y: np.ndarray, config: AttackConfig, selection: SelectionConfig,
               check: bool = True) -> AttackResult:
    """Run the full attack on a batch ``x`` with labels ``y``.

    ``y`` holds the true labels, or the target labels when ``config.targeted``.
    With ``check`` the eps-ball and box constraints are asserted after each
    iteration.
    """
    if selection.s != len(surrogates):
        raise ContractError(f"selection expects s={selection.s} models, got {len(surrogates)}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    parts = config.components
    eps, alpha, mu = config.epsilon, config.step, config.mu
    selector = Selector(selection)
    rng = np.random.default_rng([int(config.transform_seed), 0xD1])
    state = AttackState(x, x.copy(), np.zeros_like(x))
    trace = AttackTrace(model_names=[m.name for m in surrogates])
    before = 0
    for t in range(config.iterations):
        chosen = selector.select(t)
        models = [surrogates[i] for i in chosen]
        point = lookahead_NI(state, mu, alpha) if "NI" in parts else state.x_adv
        if "NI" in parts:
            trace.lookahead_linf.append(float(np.abs(point - x).max()))
        n_copies = config.si_copies if "SI" in parts else 1
        grad = np.zeros_like(x)
        own = [np.zeros_like(x) for _ in models] if config.record_gradients else None
        for i in range(n_copies):
            scale = 0.5**i
            mat = di_matrix(x.shape, config.di_prob, rng) if "DI" in parts else None
            inp = apply_gather(point * scale, mat)
            out = fuse(models, inp, y, config.fusion, config.targeted, state.counters,
                       per_model=config.record_gradients)
            grad += scale * gather_backward(out[1], mat)
            if own is not None:
                for k, gk in enumerate(out[2]):
                    own[k] += scale * gather_backward(gk, mat)
        grad /= n_copies
        if own is not None:
            trace.gradients.append(np.stack([gk / n_copies for gk in own]))
        if "TI" in parts:
            grad = smooth_TI(grad, config.ti_kernel)
        if parts:
            step_MI(state, grad, mu, alpha, eps)
        else:
            state.x_adv = project(state.x_adv + alpha * np.sign(grad), x, eps)
            state.t += 1
        trace.selections.append(chosen)
        total = state.counters.total_forward()
        trace.forward_per_iteration.append(total - before)
        before = total
        dist = float(np.abs(state.x_adv - x).max())
        trace.linf.append(dist)
        trace.box.append((float(state.x_adv.min()), float(state.x_adv.max())))
        if check:
            assert dist <= eps + 1e-12, f"iteration {t}: |x_adv - x|_inf = {dist} > {eps}"
            assert 0.0 <= state.x_adv.min() and state.x_adv.max() <= 1.0, f"iteration {t}: left [0, 1]"
    trace.forward_counts = dict(state.counters.forward)
    trace.backward_counts = dict(state.counters.backward)
    return AttackResult(state.x_adv, trace)
