"""Selective and conventional surrogate-ensemble attacks on a desk-scale model zoo."""

from .attack import AttackConfig, fuse, run_attack
from .selection import SelectionConfig, expected_distinct
from .zoo import ArchSpec, Model, ModelPool

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "AttackConfig",
    "Model",
    "ModelPool",
    "SelectionConfig",
    "expected_distinct",
    "fuse",
    "run_attack",
]
