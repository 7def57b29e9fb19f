"""Campaign orchestration: experiment matrices, success rates, CSV output."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import diversity, zoo
from .attack import AttackConfig, fuse_name, parse_baseline, run_attack, target_labels
from .errors import ConfigError, ContractError
from .selection import (
    IDENTICAL,
    SelectionConfig,
    canonical_strategy,
    expected_distinct,
    random_subset,
    simulate_distinct,
    variance_distinct,
)

log = logging.getLogger(__name__)

COLUMNS = (
    "run_id", "strategy", "s", "m", "T", "baseline", "fusion", "targeted", "target_model",
    "asr", "time_ms", "forward_count", "backward_count", "n_distinct", "d_i_mean", "d_c_mean", "seed",
    "peak_params", "error",
)

DEFAULT_POOL_DIR = Path(os.environ.get("SEABENCH_POOL", Path.home() / ".cache" / "seabench" / "pool"))
POOL_EPOCHS = 20
POOL_LR = 0.02
# how the identical strategy picks its m models: the first m in pool order, or a draw seeded per repeat
SUBSETS = ("first", "random")


def attack_success_rate(target, adv, labels, targeted: bool = False, target_labels=None) -> float:
    """Untargeted: fraction misclassified. Targeted: fraction predicted as the target label."""
    labels = np.asarray(labels)
    if len(adv) != len(labels):
        raise ContractError(f"{len(adv)} adversarial inputs but {len(labels)} labels")
    pred = target.predict(adv)
    if not targeted:
        return float(np.mean(pred != labels))
    if target_labels is None or len(target_labels) != len(labels):
        raise ContractError("targeted success rate needs one target label per input")
    target_labels = np.asarray(target_labels)
    if np.any(target_labels == labels):
        log.warning("target label equals the true label for %d inputs; targeted success "
                    "there only measures correct classification", int(np.sum(target_labels == labels)))
    return float(np.mean(pred == target_labels))


# ---------------------------------------------------------------------------
# configuration

CONFIG_KEYS = {
    "pool.s": int,
    "pool.dir": str,
    "pool.family": str,
    "attack.m": "intlist",
    "attack.epsilon_255": float,
    "attack.alpha_255": float,
    "attack.T": int,
    "attack.mu": float,
    "attack.baseline": "list",
    "attack.fusion": str,
    "attack.targeted": "bool",
    "select.strategy": "list",
    "select.subset": str,
    "eval.n": int,
    "campaign.repeats": int,
    "campaign.seed": int,
    "campaign.workers": int,
    "campaign.diversity": "bool",
    "io.out": str,
}


@dataclass
class CampaignSpec:
    s: int = 20
    m_values: tuple[int, ...] = (4,)
    epsilon_255: float = 16.0
    alpha_255: float | None = None
    iterations: int = 10
    mu: float = 1.0
    baselines: tuple[str, ...] = ("MI",)
    strategies: tuple[str, ...] = (IDENTICAL, "random-without-replacement")
    fusion: str = "logit"
    targeted: bool = False
    eval_n: int = 100
    repeats: int = 1
    seed: int = 0
    workers: int = 1
    diversity: bool = False
    family: str | None = None
    subset: str = "random"
    pool_dir: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.strategies = tuple(canonical_strategy(s) for s in self.strategies)
        for b in self.baselines:
            parse_baseline(b)
        self.fusion = fuse_name(self.fusion)
        if self.s < 1 or any(not 1 <= m <= self.s for m in self.m_values):
            raise ConfigError(f"need 1 <= m <= s for every m; s={self.s}, m={self.m_values}")
        if self.repeats < 1 or self.eval_n < 1 or self.iterations < 1 or self.workers < 1:
            raise ConfigError("repeats, eval.n, attack.T and campaign.workers must be positive")
        if not 0 < self.epsilon_255 <= 255:
            raise ConfigError(f"attack.epsilon_255 must be in (0, 255], got {self.epsilon_255}")
        if self.family is not None and self.family not in zoo.FAMILIES:
            raise ConfigError(f"unknown pool.family {self.family!r}")
        if self.subset not in SUBSETS:
            raise ConfigError(f"select.subset must be one of {SUBSETS}, got {self.subset!r}")

    def cells(self):
        """(index, baseline, strategy, m) in a fixed order."""
        combos = itertools.product(self.baselines, self.strategies, self.m_values)
        return [(i, b, st, m) for i, (b, st, m) in enumerate(combos)]

    def selection(self, strategy: str, s: int, m: int, seed: int) -> SelectionConfig:
        """Selection for one run; a fixed ensemble is either the first m models or a seeded draw."""
        fixed = None
        if canonical_strategy(strategy) == IDENTICAL and self.subset == "random":
            fixed = random_subset(s, m, seed)
        return SelectionConfig(strategy, s, m, seed, fixed)

    def attack_config(self, baseline: str, seed: int) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon_255 / 255.0,
            iterations=self.iterations,
            alpha=None if self.alpha_255 is None else self.alpha_255 / 255.0,
            mu=self.mu,
            fusion=self.fusion,
            baseline=baseline,
            targeted=self.targeted,
            transform_seed=seed,
            record_gradients=self.diversity,
        )


def _coerce(key: str, kind, raw: str, lineno: int):
    try:
        if kind == "list":
            items = tuple(p.strip() for p in raw.split(",") if p.strip())
            if not items:
                raise ValueError("empty list")
            return items
        if kind == "intlist":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None


def parse_config(text: str) -> CampaignSpec:
    """Parse ``key = value`` lines; '#' starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}; known keys: {', '.join(sorted(CONFIG_KEYS))}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, CONFIG_KEYS[key], raw, lineno)
    mapping = {
        "pool.s": "s", "pool.dir": "pool_dir", "pool.family": "family", "attack.m": "m_values",
        "attack.epsilon_255": "epsilon_255", "attack.alpha_255": "alpha_255", "attack.T": "iterations",
        "attack.mu": "mu", "attack.baseline": "baselines", "attack.fusion": "fusion",
        "attack.targeted": "targeted", "select.strategy": "strategies",
        "select.subset": "subset", "eval.n": "eval_n",
        "campaign.repeats": "repeats", "campaign.seed": "seed", "campaign.workers": "workers",
        "campaign.diversity": "diversity", "io.out": "out",
    }
    return CampaignSpec(**{mapping[k]: v for k, v in values.items()})


def load_config(path) -> CampaignSpec:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# pools


def ensure_pool(pool_dir=None, *, seed: int = 0, epochs: int = POOL_EPOCHS, lr: float = POOL_LR):
    """Load the pool at ``pool_dir``; train and save the default zoo if it is absent."""
    pool_dir = Path(pool_dir or DEFAULT_POOL_DIR)
    if not (pool_dir / "pool.json").exists():
        log.info("no pool at %s; training the default zoo", pool_dir)
        dataset = data_mod.generate()
        surrogates, targets = zoo.default_specs()
        zoo.train_pool(dataset, surrogates, targets, epochs=epochs, lr=lr, seed=seed, out_dir=pool_dir)
    pool, desc = zoo.load_pool(pool_dir)
    return pool, data_mod.from_description(desc)


def surrogate_view(pool: zoo.ModelPool, s: int, family: str | None = None) -> list:
    """First ``s`` surrogates of the pool, optionally restricted to one family."""
    candidates = [pool.surrogates[i] for i in pool.by_family(family)] if family else pool.surrogates
    if s > len(candidates):
        raise ConfigError(f"pool.s={s} but only {len(candidates)} surrogates available")
    return candidates[:s]


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class CampaignResult:
    rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(not r["error"] for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in COLUMNS})
        return buf.getvalue()

    def write(self, path) -> None:
        write_atomic(path, self.to_csv())

    def summary(self, key=("strategy", "s", "m", "baseline", "target_model")) -> list[dict]:
        """Mean and std of ASR over repeats for every group of ``key`` columns."""
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            if not r["error"]:
                groups.setdefault(tuple(r[k] for k in key), []).append(r["asr"])
        return [
            {**dict(zip(key, k)), "asr_mean": float(np.mean(v)), "asr_std": float(np.std(v)), "runs": len(v)}
            for k, v in groups.items()
        ]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return value


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


_INT_COLS = {"s", "m", "T", "forward_count", "backward_count", "n_distinct", "seed", "peak_params"}
_FLOAT_COLS = {"asr", "time_ms", "d_i_mean", "d_c_mean"}


def read_csv(path) -> CampaignResult:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ContractError(f"unexpected CSV header {reader.fieldnames}")
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if k in _INT_COLS:
                    row[k] = int(v) if v else None
                elif k in _FLOAT_COLS:
                    row[k] = float(v) if v else float("nan")
                elif k == "targeted":
                    row[k] = v == "true"
                else:
                    row[k] = v
            rows.append(row)
    return CampaignResult(rows)


def _run_cell(spec: CampaignSpec, surrogates, targets, dataset, cell, repeat: int) -> list[dict]:
    idx, baseline, strategy, m = cell
    seed = spec.seed + repeat
    base = {
        "run_id": f"c{idx}-r{repeat}", "strategy": strategy, "s": len(surrogates), "m": m,
        "T": spec.iterations, "baseline": baseline, "fusion": spec.fusion, "targeted": spec.targeted,
        "seed": seed, "error": "",
    }
    try:
        ev = data_mod.build_eval_set(dataset, surrogates + targets, spec.eval_n, seed)
        x, y = ev.inputs, ev.labels
        goal = target_labels(y, dataset.classes) if spec.targeted else y
        cfg = spec.attack_config(baseline, seed)
        sel = spec.selection(strategy, len(surrogates), m, seed)
        start = time.perf_counter_ns()
        result = run_attack(surrogates, x, goal, cfg, sel)
        elapsed = (time.perf_counter_ns() - start) / 1e6
        tr = result.trace
        peak = max(sum(surrogates[i].n_params() for i in chosen) for chosen in tr.selections)
        d_i = d_c = float("nan")
        if spec.diversity:
            rep = diversity.report(tr, diversity.GRAD)
            d_i, d_c = rep.d_i_mean, rep.d_c_mean
        rows = []
        for target in targets:
            asr = attack_success_rate(target, result.adv, y, spec.targeted, goal if spec.targeted else None)
            rows.append({
                **base, "target_model": target.name, "asr": asr, "time_ms": elapsed,
                "forward_count": tr.total_forward, "backward_count": tr.total_backward,
                "n_distinct": tr.n_distinct, "d_i_mean": d_i, "d_c_mean": d_c, "peak_params": peak,
            })
        return rows
    except Exception as exc:  # a failing cell is recorded, the campaign goes on
        log.exception("cell %s repeat %d failed", idx, repeat)
        return [{**base, "target_model": "", "error": f"{type(exc).__name__}: {exc}"}]


def _run_job(args):
    return args[-2:], _run_cell(*args)


def run_campaign(spec: CampaignSpec, pool: zoo.ModelPool | None = None, dataset=None) -> CampaignResult:
    """One row per (cell, target, repeat); rows ordered by (cell, repeat, target)."""
    if pool is None:
        pool, dataset = ensure_pool(spec.pool_dir)
    surrogates = surrogate_view(pool, spec.s, spec.family)
    jobs = [(spec, surrogates, pool.targets, dataset, cell, r) for cell in spec.cells() for r in range(spec.repeats)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as ex:
            done = list(ex.map(_run_job, jobs))
    else:
        done = [_run_job(j) for j in jobs]
    done.sort(key=lambda item: (item[0][0][0], item[0][1]))
    result = CampaignResult([row for _, rows in done for row in rows])
    if spec.out:
        result.write(spec.out)
    return result


# ---------------------------------------------------------------------------


def verify_expectation(s: int, m: int, T: int, trials: int = 100_000, seed: int = 0) -> dict:
    """Compare the closed-form expectation of n with a with-replacement simulation.

    The verdict uses the exact standard error of the Monte-Carlo mean,
    sqrt(Var(n) / trials); the sample estimate is reported alongside. The
    sample estimate collapses to 0 when every trial hits all s models.
    """
    if trials < 10_000:
        raise ConfigError(f"need at least 10^4 trials, got {trials}")
    samples = simulate_distinct(s, m, T, trials, np.random.default_rng(seed))
    closed = expected_distinct(s, m, T)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(trials))
    exact_se = math.sqrt(variance_distinct(s, m, T) / trials)
    return {
        "s": s, "m": m, "T": T, "trials": trials,
        "closed_form": closed, "empirical_mean": mean, "std_error": exact_se,
        "sample_std_error": se, "ens_n": m,
        "within_3se": abs(mean - closed) <= 3 * exact_se,
    }
