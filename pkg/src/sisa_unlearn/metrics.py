"""Accuracy, retraining-cost and storage reporting for unlearning experiments."""
from __future__ import annotations

import csv
import dataclasses
import math
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .data import DEFAULT_TOKEN_CAP, Dataset, FeatureTable, featurize_dataset
from .engine import (
    Ensemble,
    baseline_train,
    default_dims,
    predict_batch,
    retrain_cost,
    train_all,
    unlearn,
)
from .learner import HeadMode, ModelDims, ModelParams, TrainConfig, predict_proba_batch
from .partition import PartitionPlan, RiskProfiled, UniformRandom, make_plan, remove
from .requests import INVERSE_PARETO, PARETO, UNIFORM, RequestDistribution, sample_requests
from .rng import SeedKey, splitmix64_scalar, stream
from .store import CheckpointStore, storage_report

Z95 = 1.959963984540054


class MajorityClassifier:
    """Always predicts the most frequent training label (ties: lowest class)."""

    def __init__(self, labels: Iterable[int], num_classes: int):
        counts = np.bincount(np.fromiter(labels, dtype=np.int64), minlength=num_classes)
        self.label = int(np.argmax(counts))
        self.num_classes = num_classes

    @classmethod
    def fit(cls, data: FeatureTable) -> "MajorityClassifier":
        return cls((data.labels[i] for i in data.ids), data.num_classes)


def predict_labels(model, fvs) -> np.ndarray:
    if isinstance(model, Ensemble):
        return predict_batch(model, fvs)
    if isinstance(model, ModelParams):
        if not fvs:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(predict_proba_batch(model, fvs), axis=1)
    if isinstance(model, MajorityClassifier):
        return np.full(len(fvs), model.label, dtype=np.int64)
    raise TypeError(f"cannot evaluate {type(model).__name__}")


@dataclass(frozen=True)
class EvalReport:
    correct: int
    n_test: int
    per_class: dict[int, tuple[int, int]]  # class -> (correct, support)
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.n_test)

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_test


def evaluate(model, test: FeatureTable | Dataset, config: dict | None = None,
             *, token_cap: int = DEFAULT_TOKEN_CAP) -> EvalReport:
    if isinstance(test, Dataset):
        dim = model.dims.input_dim if hasattr(model, "dims") else 1
        test = featurize_dataset(test, dim, token_cap)
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    labels = np.array([test.labels[i] for i in test.ids], dtype=np.int64)
    pred = predict_labels(model, [test.features[i] for i in test.ids])
    hit = pred == labels
    per_class = {
        c: (int(hit[labels == c].sum()), int((labels == c).sum())) for c in range(test.num_classes)
    }
    return EvalReport(int(hit.sum()), len(labels), per_class, dict(config or {}))


def subsample(data: FeatureTable, fraction: float, seed: int) -> FeatureTable:
    """Seeded subset of ``round(fraction * n)`` ids, kept in table order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("data fraction must lie in (0, 1]")
    if fraction == 1.0:
        return data
    k = max(1, int(math.floor(fraction * len(data) + 0.5)))
    pick = stream(seed, "fraction").permutation(len(data))[:k]
    return data.subset(data.ids[j] for j in pick)


@dataclass(frozen=True)
class ExperimentGrid:
    slices: tuple[int, ...] = (2, 4, 8, 16)
    request_counts: tuple[int, ...] = (16,)
    distributions: tuple[RequestDistribution, ...] = (UNIFORM,)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("slices", "request_counts", "distributions", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name!r} is empty")
        if min(self.slices) < 1 or min(self.request_counts) < 0:
            raise ValueError("slice counts must be >= 1 and request counts >= 0")


ACCURACY_COLUMNS = ("dataset", "mode", "R", "distribution", "seed", "request_index", "accuracy")
RETRAIN_COLUMNS = ("dataset", "mode", "R", "distribution", "seed", "request_index",
                   "cumulative_steps", "incremental_steps", "wall_ms")
MEMORY_COLUMNS = ("mode", "R", "total_bytes")
BASELINE_COLUMNS = ("dataset", "mode", "data_fraction", "seed", "accuracy", "gradient_steps")


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


@dataclass
class ExperimentResult:
    accuracy: list[tuple] = field(default_factory=list)
    retrain: list[tuple] = field(default_factory=list)
    memory: list[tuple] = field(default_factory=list)
    baseline: list[tuple] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return {
            "accuracy": write_csv(out / "accuracy.csv", ACCURACY_COLUMNS, self.accuracy),
            "retrain": write_csv(out / "retrain.csv", RETRAIN_COLUMNS, self.retrain),
            "memory": write_csv(out / "memory.csv", MEMORY_COLUMNS, self.memory),
            "baseline": write_csv(out / "baseline.csv", BASELINE_COLUMNS, self.baseline),
        }


def run_experiment(
    grid: ExperimentGrid,
    train: FeatureTable,
    test: FeatureTable,
    cfg: TrainConfig,
    mode: HeadMode,
    out_dir: str | Path | None = None,
    *,
    num_shards: int = 5,
    dims: ModelDims | None = None,
    data_fraction: float = 1.0,
    timing: bool = True,
    workers: int = 1,
    with_baseline: bool = True,
) -> ExperimentResult:
    """Train, stream deletions one at a time, and evaluate, for every grid cell.

    Each seed sets the global training seed, the subsample, the plan and the
    request stream. Accuracy is measured before any request and after each
    request index listed in ``grid.request_counts``.
    """
    dims = dims or default_dims(train)
    n_requests = max(grid.request_counts)
    eval_at = set(grid.request_counts)
    res = ExperimentResult()
    seen_memory: set[tuple[str, int]] = set()
    with tempfile.TemporaryDirectory(prefix="sisa-grid-") as scratch:
        for seed in grid.seeds:
            cell_cfg = dataclasses.replace(cfg, global_seed=seed)
            sub = subsample(train, data_fraction, seed)
            if with_baseline:
                model, led = baseline_train(sub, cell_cfg, mode, dims)
                acc = evaluate(model, test).accuracy
                res.baseline.append((train.name, mode.name, data_fraction, seed, acc, led.gradient_steps))
            for R in grid.slices:
                plan = make_plan(sub.ids, num_shards, R, UniformRandom(), seed)
                trained = Path(scratch) / f"R{R}_s{seed}"
                ens, _ = train_all(plan, sub, cell_cfg, mode, CheckpointStore(trained), dims, workers=workers)
                key = (mode.name, R)
                if key not in seen_memory:
                    seen_memory.add(key)
                    res.memory.append((mode.name, R, storage_report(CheckpointStore(trained))[mode.name][1]))
                acc0 = evaluate(ens, test).accuracy
                for dist in grid.distributions:
                    work = Path(scratch) / f"R{R}_s{seed}_{dist.kind}"
                    shutil.copytree(trained, work)
                    store = CheckpointStore(work)
                    label = (train.name, mode.name, R, dist.kind, seed)
                    res.accuracy.append((*label, 0, acc0))
                    requests = sample_requests(plan, dist, n_requests, seed)
                    cur_ens, cur_plan, cumulative = ens, plan, 0
                    for k, rid in enumerate(requests, 1):
                        t0 = time.perf_counter()
                        cur_ens, cur_plan, led = unlearn(cur_ens, store, cur_plan, sub, [rid], cell_cfg, mode, dims)
                        wall = int(round((time.perf_counter() - t0) * 1000)) if timing else 0
                        cumulative += led.gradient_steps
                        res.retrain.append((*label, k, cumulative, led.gradient_steps, wall))
                        if k in eval_at:
                            res.accuracy.append((*label, k, evaluate(cur_ens, test).accuracy))
                    shutil.rmtree(work)
                shutil.rmtree(trained)
    if out_dir is not None:
        res.write(out_dir)
    return res


@dataclass(frozen=True)
class ProfileSpec:
    label: str
    distribution: RequestDistribution
    risk_profiled: bool = False


DEFAULT_PROFILES = (
    ProfileSpec("uniform", UNIFORM),
    ProfileSpec("pareto", PARETO),
    ProfileSpec("inverse_pareto", INVERSE_PARETO),
    ProfileSpec("risk_profiled+inverse_pareto", INVERSE_PARETO, risk_profiled=True),
)


def _mean_ci(values: Sequence[float]) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    half = Z95 * float(arr.std(ddof=1)) / math.sqrt(arr.size) if arr.size > 1 else float("inf")
    return mean, mean - half, mean + half


@dataclass
class DistributionComparison:
    """Per-seed unlearning costs for each request profile."""

    seeds: tuple[int, ...]
    n_requests: int
    incremental: dict[str, np.ndarray]  # label -> (n_seeds, n_requests) steps

    def cumulative(self, label: str) -> np.ndarray:
        return self.incremental[label].sum(axis=1)

    def summary_rows(self) -> list[tuple]:
        rows = []
        half = self.n_requests // 2
        for label, inc in self.incremental.items():
            mean, lo, hi = _mean_ci(inc.sum(axis=1))
            rows.append((label, len(self.seeds), mean, lo, hi,
                         float(inc[:, :half].mean()), float(inc[:, half:].mean())))
        return rows

    def paired_less(self, a: str, b: str) -> tuple[bool, float, float]:
        """Whether E[cost a] < E[cost b] at 95% (one-sided, paired by seed)."""
        diff = self.cumulative(b) - self.cumulative(a)
        mean, lo, _ = _mean_ci(diff)
        lo_one_sided = mean - (mean - lo) * (1.6448536269514722 / Z95)
        return lo_one_sided > 0, mean, lo_one_sided

    def flatness(self, label: str) -> float:
        """Mean incremental cost of the second half of requests over the first half."""
        inc = self.incremental[label]
        half = self.n_requests // 2
        return float(inc[:, half:].mean() / inc[:, :half].mean())

    def ordering_rows(self) -> list[tuple]:
        rows = []
        for a, b in (("inverse_pareto", "uniform"), ("uniform", "pareto"),
                     ("risk_profiled+inverse_pareto", "uniform")):
            if a in self.incremental and b in self.incremental:
                ok, mean, lo = self.paired_less(a, b)
                rows.append((f"{a} < {b}", ok, mean, lo))
        return rows

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return {
            "summary": write_csv(out / "distributions.csv",
                                 ("profile", "n_seeds", "mean_cumulative_steps", "ci_low", "ci_high",
                                  "mean_incremental_first_half", "mean_incremental_second_half"),
                                 self.summary_rows()),
            "ordering": write_csv(out / "ordering.csv",
                                  ("check", "holds", "mean_paired_difference", "one_sided_95_lower"),
                                  self.ordering_rows()),
        }


def risk_scores(ids: Sequence[int], seed: int) -> dict[int, float]:
    """Synthetic opt-out propensities in [0, 1), hashed per id so deletions never move them."""
    return {i: splitmix64_scalar(SeedKey(seed, "risk", i).seed)[1] / 2.0**64 for i in ids}


def compare_distributions(
    data: FeatureTable,
    cfg: TrainConfig,
    n_requests: int,
    seeds: Sequence[int],
    *,
    num_shards: int = 5,
    num_slices: int = 16,
    mode: HeadMode | None = None,
    dims: ModelDims | None = None,
    profiles: Sequence[ProfileSpec] = DEFAULT_PROFILES,
    execute: bool = True,
) -> DistributionComparison:
    """Unlearning cost of ``n_requests`` sequential deletions per profile and seed.

    With ``execute=True`` every deletion is really unlearned and costs come
    from the engine ledger. With ``execute=False`` costs come from
    :func:`retrain_cost` on the same plans and request streams, without
    training.
    """
    if len(seeds) < 2:
        raise ValueError("need at least two seeds for confidence intervals")
    mode = mode or HeadMode.adapter()
    dims = dims or default_dims(data)
    costs = {p.label: np.zeros((len(seeds), n_requests), dtype=np.int64) for p in profiles}
    with tempfile.TemporaryDirectory(prefix="sisa-dist-") as scratch:
        for si, seed in enumerate(seeds):
            cell_cfg = dataclasses.replace(cfg, global_seed=seed)
            trained: dict[bool, tuple[PartitionPlan, Ensemble | None, Path]] = {}
            for prof in profiles:
                if prof.risk_profiled not in trained:
                    strategy = RiskProfiled(risk_scores(data.ids, seed)) if prof.risk_profiled else UniformRandom()
                    plan = make_plan(data.ids, num_shards, num_slices, strategy, seed)
                    root = Path(scratch) / f"s{seed}_{int(prof.risk_profiled)}"
                    ens = None
                    if execute:
                        ens, _ = train_all(plan, data, cell_cfg, mode, CheckpointStore(root), dims)
                    trained[prof.risk_profiled] = (plan, ens, root)
                plan, ens, root = trained[prof.risk_profiled]
                requests = sample_requests(plan, prof.distribution, n_requests, seed)
                if execute:
                    work = Path(scratch) / f"s{seed}_{prof.label}"
                    shutil.copytree(root, work)
                    store = CheckpointStore(work)
                for k, rid in enumerate(requests):
                    if execute:
                        ens, plan, led = unlearn(ens, store, plan, data, [rid], cell_cfg, mode, dims)
                        costs[prof.label][si, k] = led.gradient_steps
                    else:
                        plan, affected = remove(plan, [rid])
                        costs[prof.label][si, k] = retrain_cost(plan, affected, cell_cfg)[0]
                if execute:
                    shutil.rmtree(work)
    return DistributionComparison(tuple(seeds), n_requests, costs)
