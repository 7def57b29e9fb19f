"""Gradient-similarity measures of within- and cross-iteration model diversity.

Both quantities are cosine similarities, so lower values mean more diverse
models. Snapshots are the raw per-model input gradients recorded by
``run_attack(..., record_gradients=True)``: shape [m, N, C, H, W] per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError
from .tensor import batch_cosine, cosine_similarity

GRAD = "grad"
SIGN_GRAD = "sign-grad"
VARIANTS = (GRAD, SIGN_GRAD)


def within_iteration(grads) -> float:
    """Mean pairwise cosine similarity of m >= 2 gradients (flattened)."""
    if len(grads) < 2:
        raise ConfigError(f"within-iteration similarity needs m >= 2 gradients, got {len(grads)}")
    pairs = list(combinations(range(len(grads)), 2))
    return float(np.mean([cosine_similarity(grads[i], grads[j]) for i, j in pairs]))


def cross_iteration(mean_grad_t, mean_grad_next) -> float:
    return cosine_similarity(mean_grad_t, mean_grad_next)


def _within_per_sample(snap: np.ndarray) -> np.ndarray:
    pairs = list(combinations(range(snap.shape[0]), 2))
    return np.mean([batch_cosine(snap[i], snap[j]) for i, j in pairs], axis=0)


@dataclass
class DiversityReport:
    variant: str
    d_i: np.ndarray  # [iterations with m >= 2, samples]
    d_c: np.ndarray  # [iterations - 1, samples]

    @staticmethod
    def _stats(values: np.ndarray):
        if values.size == 0:
            return float("nan"), float("nan")
        per_iter = values.mean(axis=1)
        return float(values.mean()), float(per_iter.std())

    @property
    def d_i_mean(self) -> float:
        return self._stats(self.d_i)[0]

    @property
    def d_i_std(self) -> float:
        """Standard deviation across iterations of the per-iteration means."""
        return self._stats(self.d_i)[1]

    @property
    def d_c_mean(self) -> float:
        return self._stats(self.d_c)[0]

    @property
    def d_c_std(self) -> float:
        return self._stats(self.d_c)[1]

    @property
    def d_i_sample_std(self) -> float:
        return float(self.d_i.mean(axis=0).std()) if self.d_i.size else float("nan")

    @property
    def d_c_sample_std(self) -> float:
        return float(self.d_c.mean(axis=0).std()) if self.d_c.size else float("nan")

    def row(self) -> dict:
        return {
            "d_i_mean": self.d_i_mean,
            "d_i_std": self.d_i_std,
            "d_c_mean": self.d_c_mean,
            "d_c_std": self.d_c_std,
            "variant": self.variant,
        }


def report(trace, variant: str = GRAD) -> DiversityReport:
    """Per-iteration D_i and per-adjacent-pair D_c, computed per sample."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown diversity variant {variant!r}; expected one of {VARIANTS}")
    snaps = trace.gradients if hasattr(trace, "gradients") else trace
    if not snaps:
        raise ConfigError("trace has no gradient snapshots; run the attack with record_gradients=True")
    # sign is applied to exactly the vectors being compared
    sign = np.sign if variant == SIGN_GRAD else (lambda a: a)
    n = snaps[0].shape[1]
    d_i = [_within_per_sample(sign(s)) for s in snaps if s.shape[0] >= 2]
    means = [sign(s.mean(axis=0)) for s in snaps]
    d_c = [batch_cosine(a, b) for a, b in zip(means, means[1:])]
    return DiversityReport(
        variant,
        np.array(d_i).reshape(len(d_i), n),
        np.array(d_c).reshape(len(d_c), n),
    )
