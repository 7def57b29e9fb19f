"""Per-iteration choice of which surrogates take part in an attack step.

``identical`` reuses one fixed subset every iteration (the conventional
ensemble). The two random strategies draw a fresh subset each iteration:
``random-with-replacement`` samples independently per iteration, while
``random-without-replacement`` walks through shuffled passes over the pool so
no model repeats until every model has been used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

IDENTICAL = "identical"
WITH_REPLACEMENT = "random-with-replacement"
WITHOUT_REPLACEMENT = "random-without-replacement"
STRATEGIES = (IDENTICAL, WITH_REPLACEMENT, WITHOUT_REPLACEMENT)

ALIASES = {
    "ens": IDENTICAL,
    "identical": IDENTICAL,
    "sea": WITHOUT_REPLACEMENT,
    "with-replacement": WITH_REPLACEMENT,
    "without-replacement": WITHOUT_REPLACEMENT,
    WITH_REPLACEMENT: WITH_REPLACEMENT,
    WITHOUT_REPLACEMENT: WITHOUT_REPLACEMENT,
}


def canonical_strategy(name: str) -> str:
    try:
        return ALIASES[name.strip().lower()]
    except KeyError:
        raise ConfigError(f"unknown selection strategy {name!r}; expected one of {STRATEGIES}") from None


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str
    s: int
    m: int
    seed: int = 0
    fixed_subset: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))
        if self.s < 1 or not 1 <= self.m <= self.s:
            raise ConfigError(f"need 1 <= m <= s, got s={self.s}, m={self.m}")
        if self.strategy == IDENTICAL:
            subset = tuple(range(self.m)) if self.fixed_subset is None else tuple(int(i) for i in self.fixed_subset)
            if len(subset) != self.m or len(set(subset)) != self.m or not all(0 <= i < self.s for i in subset):
                raise ConfigError(f"identical strategy needs {self.m} distinct indices in [0, {self.s}), got {subset}")
            object.__setattr__(self, "fixed_subset", subset)
        elif self.fixed_subset is not None:
            raise ConfigError(f"fixed_subset only applies to the identical strategy, not {self.strategy}")


def random_subset(s: int, m: int, seed: int) -> tuple[int, ...]:
    """A sorted m-subset of range(s) drawn from its own stream, for seeded fixed ensembles."""
    if s < 1 or not 1 <= m <= s:
        raise ConfigError(f"need 1 <= m <= s, got s={s}, m={m}")
    rng = np.random.default_rng([int(seed), 0x5E2])
    return tuple(sorted(int(i) for i in rng.choice(s, size=m, replace=False)))


class Selector:
    """Stateful selector; call :meth:`select` with t = 0, 1, 2, ... in order.

    Owns its RNG, seeded only from ``config.seed``, so no other random stream
    can perturb the sequence of choices.
    """

    def __init__(self, config: SelectionConfig):
        self.config = config
        self.rng = np.random.default_rng([int(config.seed), 0x5E1])
        self._queue: list[int] = []
        self._last: list[int] = []
        self._t = 0
        self.history: list[list[int]] = []

    def select(self, t: int) -> list[int]:
        if t != self._t:
            raise ConfigError(f"selection must proceed in order: expected t={self._t}, got {t}")
        cfg = self.config
        if cfg.strategy == IDENTICAL:
            chosen = list(cfg.fixed_subset)
        elif cfg.strategy == WITH_REPLACEMENT:
            chosen = self.rng.choice(cfg.s, size=cfg.m, replace=False).tolist()
        else:
            chosen = self._take_without_replacement()
        chosen = sorted(chosen)
        self._last = chosen
        self._t += 1
        self.history.append(chosen)
        return chosen

    def _take_without_replacement(self) -> list[int]:
        m = self.config.m
        chosen = self._queue[:m]
        self._queue = self._queue[m:]
        if len(chosen) < m:
            self._refill(exclude=set(chosen))
            need = m - len(chosen)
            chosen += self._queue[:need]
            self._queue = self._queue[need:]
        return chosen

    def _refill(self, exclude: set[int]) -> None:
        # New pass over the whole pool. Models already picked in the current
        # iteration go last (no duplicates within an iteration); models used in
        # the previous iteration are pushed behind fresh ones where possible.
        perm = self.rng.permutation(self.config.s).tolist()
        last = set(self._last)
        fresh = [i for i in perm if i not in exclude and i not in last]
        recent = [i for i in perm if i not in exclude and i in last]
        current = [i for i in perm if i in exclude]
        self._queue = fresh + recent + current


@dataclass
class SelectionTrace:
    chosen: list[list[int]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(set().union(*self.chosen)) if self.chosen else 0


def select(config: SelectionConfig, t: int, state: Selector | None = None) -> list[int]:
    """Functional wrapper: advance ``state`` (a :class:`Selector`) to iteration ``t``."""
    if state is None:
        state = Selector(config)
    while state._t < t:
        state.select(state._t)
    return state.select(t)


def selection_trace(config: SelectionConfig, iterations: int) -> SelectionTrace:
    sel = Selector(config)
    return SelectionTrace([sel.select(t) for t in range(iterations)])


def expected_distinct(s: int, m: int, T: int) -> float:
    """Expected number of distinct models touched by T independent m-of-s draws."""
    if not 1 <= m <= s or T < 1:
        raise ConfigError(f"need 1 <= m <= s and T >= 1, got s={s}, m={m}, T={T}")
    return s * (1.0 - ((s - m) / s) ** T)


def variance_distinct(s: int, m: int, T: int) -> float:
    """Exact variance of n under with-replacement selection.

    n is a sum of s indicators "model i used at least once"; a single model is
    missed with probability q = ((s-m)/s)^T and a given pair is missed with
    r = ((s-m)(s-m-1) / (s(s-1)))^T.
    """
    expected_distinct(s, m, T)
    q = ((s - m) / s) ** T
    r = ((s - m) * (s - m - 1) / (s * (s - 1))) ** T if s > 1 else 0.0
    return max(s * q * (1 - q) + s * (s - 1) * (r - q * q), 0.0)


def simulate_distinct(s: int, m: int, T: int, trials: int, rng: np.random.Generator,
                      chunk: int = 20000) -> np.ndarray:
    """Monte-Carlo draws of n under with-replacement selection, one value per trial."""
    out = np.empty(trials, dtype=np.int64)
    for start in range(0, trials, chunk):
        k = min(chunk, trials - start)
        keys = rng.random((k, T, s))
        # the m smallest keys of each row form a uniform m-subset
        picked = np.argpartition(keys, m - 1, axis=2)[:, :, :m] if m < s else np.broadcast_to(np.arange(s), (k, T, s))
        seen = np.zeros((k, s), dtype=bool)
        rows = np.arange(k)[:, None]
        for t in range(T):
            seen[rows, picked[:, t, :]] = True
        out[start : start + k] = seen.sum(axis=1)
    return out
