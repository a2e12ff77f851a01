"""Sharded, sliced training with per-slice checkpoints and exact unlearning.

Each shard owns one model. Slice step ``r`` of shard ``s`` continues from the
state after step ``r - 1`` and trains on slice ``r`` (or on slices ``0..r``
with ``TrainConfig.cumulative``) using the seed stream
``(global_seed, "slice", s, r)``. Because every step is a pure function of its
inputs, rolling back to checkpoint ``r* - 1`` and replaying steps ``r*..R-1``
on the surviving ids reproduces from-scratch training bit for bit.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import FeatureTable, FeatureVector
from .learner import (
    DEFAULT_HIDDEN,
    HeadMode,
    ModelDims,
    ModelParams,
    TrainConfig,
    init_params,
    params_from_flat,
    predict_proba_batch,
    train_steps,
)
from .partition import NotFound, PartitionPlan, remove
from .rng import SeedKey
from .store import Checkpoint, CheckpointStore, StoreError

LEDGER_COLUMNS = ("event", "shard", "slice_from", "slice_to", "gradient_steps", "examples", "wall_ms")


@dataclass(frozen=True)
class LedgerEvent:
    event: str
    shard: int
    slice_from: int
    slice_to: int
    gradient_steps: int
    examples: int
    wall_ms: int = 0


@dataclass
class CostLedger:
    events: list[LedgerEvent] = field(default_factory=list)

    @property
    def gradient_steps(self) -> int:
        return sum(e.gradient_steps for e in self.events)

    @property
    def examples_processed(self) -> int:
        return sum(e.examples for e in self.events)

    @property
    def wall_clock_ms(self) -> int:
        """Advisory only; depends on the machine."""
        return sum(e.wall_ms for e in self.events)

    def record(self, *args, **kwargs) -> LedgerEvent:
        ev = LedgerEvent(*args, **kwargs)
        self.events.append(ev)
        return ev

    def merge(self, *others: "CostLedger") -> "CostLedger":
        return CostLedger([e for led in (self, *others) for e in led.events])

    def write_csv(self, path: str | Path, *, timing: bool = True, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists()
        with path.open("a" if append else "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(LEDGER_COLUMNS)
            for e in self.events:
                w.writerow([e.event, e.shard, e.slice_from, e.slice_to, e.gradient_steps,
                            e.examples, e.wall_ms if timing else 0])

    @classmethod
    def read_csv(cls, path: str | Path) -> "CostLedger":
        with Path(path).open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            LedgerEvent(r["event"], *(int(r[c]) for c in LEDGER_COLUMNS[1:])) for r in rows
        ])


@dataclass(frozen=True)
class VoteDetail:
    shard_labels: tuple[int, ...]
    counts: tuple[int, ...]
    mean_proba: np.ndarray | None = None


@dataclass(frozen=True)
class Ensemble:
    models: tuple[ModelParams, ...]
    vote: str = "hard"  # hard | soft

    def __post_init__(self):
        if not self.models:
            raise ValueError("an ensemble needs at least one model")
        if self.vote not in ("hard", "soft"):
            raise ValueError(f"unknown vote rule {self.vote!r}")
        first = self.models[0]
        if any(m.dims != first.dims or m.mode != first.mode for m in self.models):
            raise ValueError("all shard models must share dims and mode")

    @property
    def dims(self) -> ModelDims:
        return self.models[0].dims

    @property
    def mode(self) -> HeadMode:
        return self.models[0].mode

    def replace(self, shard: int, params: ModelParams) -> "Ensemble":
        models = list(self.models)
        models[shard] = params
        return Ensemble(tuple(models), self.vote)


def default_dims(data: FeatureTable, hidden: int = DEFAULT_HIDDEN) -> ModelDims:
    return ModelDims(data.dim, hidden, data.num_classes)


def _now_ms(start: float) -> int:
    return int(round((time.perf_counter() - start) * 1000))


def _step_ids(plan: PartitionPlan, shard: int, r: int, cumulative: bool) -> list[int]:
    return plan.shard_ids(shard, r) if cumulative else list(plan.slice_ids(shard, r))


def _run_slices(
    params: ModelParams,
    shard: int,
    start: int,
    plan: PartitionPlan,
    data: FeatureTable,
    cfg: TrainConfig,
    store: CheckpointStore,
) -> tuple[ModelParams, int, int]:
    steps = examples = 0
    for r in range(start, plan.num_slices):
        if plan.slice_ids(shard, r):
            ids = _step_ids(plan, shard, r, cfg.cumulative)
            key = SeedKey(cfg.global_seed, "slice", shard, r)
            params, n = train_steps(params, data.pairs(ids), cfg, key)
            steps += n
            examples += cfg.epochs * len(ids)
        # An empty slice carries the previous state forward unchanged.
        store.put(Checkpoint.create(shard, r, params.mode, params.flat_trainable(), plan.shard_ids(shard, r)))
    return params, steps, examples


def train_shard(
    shard_id: int,
    plan: PartitionPlan,
    data: FeatureTable,
    cfg: TrainConfig,
    mode: HeadMode,
    store: CheckpointStore,
    dims: ModelDims | None = None,
) -> tuple[ModelParams, CostLedger]:
    if not 0 <= shard_id < plan.num_shards:
        raise ValueError(f"shard {shard_id} not in plan with {plan.num_shards} shards")
    dims = dims or default_dims(data)
    t0 = time.perf_counter()
    params = init_params(dims, mode, cfg.global_seed, shard_id)
    params, steps, examples = _run_slices(params, shard_id, 0, plan, data, cfg, store)
    ledger = CostLedger()
    ledger.record("train", shard_id, 0, plan.num_slices - 1, steps, examples, _now_ms(t0))
    return params, ledger


def train_all(
    plan: PartitionPlan,
    data: FeatureTable,
    cfg: TrainConfig,
    mode: HeadMode,
    store: CheckpointStore,
    dims: ModelDims | None = None,
    *,
    workers: int = 1,
    vote: str = "hard",
) -> tuple[Ensemble, CostLedger]:
    dims = dims or default_dims(data)
    missing = [i for i in plan.ordered_ids() if i not in data]
    if missing:
        raise NotFound(missing)

    def one(s):
        return train_shard(s, plan, data, cfg, mode, store, dims)

    shards = range(plan.num_shards)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, shards))
    else:
        results = [one(s) for s in shards]
    ledger = CostLedger().merge(*(led for _, led in results))
    return Ensemble(tuple(p for p, _ in results), vote), ledger


def aggregate_votes(labels: Sequence[int], num_classes: int) -> tuple[int, tuple[int, ...]]:
    """Plurality vote; ties go to the lowest class index."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    return int(np.argmax(counts)), tuple(int(c) for c in counts)


def _shard_probas(ens: Ensemble, fvs: Sequence[FeatureVector]) -> list[np.ndarray]:
    return [predict_proba_batch(m, fvs) for m in ens.models]


def predict(ens: Ensemble, x: FeatureVector) -> tuple[int, VoteDetail]:
    probas = [p[0] for p in _shard_probas(ens, [x])]
    shard_labels = tuple(int(np.argmax(p)) for p in probas)
    counts = aggregate_votes(shard_labels, ens.dims.num_classes)[1]
    if ens.vote == "soft":
        mean = _mean_proba(probas)
        return int(np.argmax(mean)), VoteDetail(shard_labels, counts, mean)
    return aggregate_votes(shard_labels, ens.dims.num_classes)[0], VoteDetail(shard_labels, counts)


def _mean_proba(probas: Sequence[np.ndarray]) -> np.ndarray:
    acc = probas[0].astype(np.float64)
    for p in probas[1:]:
        acc = acc + p
    return acc / len(probas)


def predict_batch(ens: Ensemble, fvs: Sequence[FeatureVector]) -> np.ndarray:
    """Ensemble labels for many inputs; same rules as :func:`predict`."""
    if not fvs:
        return np.zeros(0, dtype=np.int64)
    probas = _shard_probas(ens, fvs)
    if ens.vote == "soft":
        return np.argmax(_mean_proba(probas), axis=1)
    c = ens.dims.num_classes
    counts = np.zeros((len(fvs), c), dtype=np.int64)
    rows = np.arange(len(fvs))
    for p in probas:
        counts[rows, np.argmax(p, axis=1)] += 1
    return np.argmax(counts, axis=1)


def restore(store: CheckpointStore, shard: int, slice_: int, dims: ModelDims, mode: HeadMode,
            global_seed: int) -> ModelParams:
    cp = store.get(shard, slice_)
    if cp.mode != mode:
        raise StoreError(f"checkpoint ({shard}, {slice_}) has mode {cp.mode}, expected {mode}")
    return params_from_flat(dims, mode, global_seed, cp.payload)


def unlearn(
    ens: Ensemble,
    store: CheckpointStore,
    plan: PartitionPlan,
    data: FeatureTable,
    requests: Iterable[int],
    cfg: TrainConfig,
    mode: HeadMode,
    dims: ModelDims | None = None,
) -> tuple[Ensemble, PartitionPlan, CostLedger]:
    """Forget ``requests`` exactly.

    All ids are validated before anything changes. Each affected shard is
    restored from the checkpoint just before its earliest affected slice (or
    re-initialised when that is slice 0) and replayed forward on the
    surviving ids with the original seed streams.
    """
    dims = dims or ens.dims
    new_plan, affected = remove(plan, requests)
    ledger = CostLedger()
    for s, first in affected.items():
        t0 = time.perf_counter()
        if first == 0:
            params = init_params(dims, mode, cfg.global_seed, s)
        else:
            params = restore(store, s, first - 1, dims, mode, cfg.global_seed)
        params, steps, examples = _run_slices(params, s, first, new_plan, data, cfg, store)
        ens = ens.replace(s, params)
        ledger.record("unlearn", s, first, plan.num_slices - 1, steps, examples, _now_ms(t0))
    return ens, new_plan, ledger


def retrain_cost(plan: PartitionPlan, affected: dict[int, int], cfg: TrainConfig) -> tuple[int, int]:
    """Steps and examples an unlearning pass will spend, computed from slice sizes alone.

    ``plan`` is the plan after removal; ``affected`` maps shard to its
    earliest affected slice.
    """
    steps = examples = 0
    for s, first in affected.items():
        for r in range(first, plan.num_slices):
            if plan.slice_ids(s, r):
                n = len(_step_ids(plan, s, r, cfg.cumulative))
                steps += cfg.epochs * math.ceil(n / cfg.batch_size)
                examples += cfg.epochs * n
    return steps, examples


def baseline_train(
    data: FeatureTable, cfg: TrainConfig, mode: HeadMode, dims: ModelDims | None = None,
    *, event: str = "baseline",
) -> tuple[ModelParams, CostLedger]:
    """One model on all of ``data`` in table order (a single shard with a single slice)."""
    if len(data) == 0:
        raise ValueError("baseline_train needs a nonempty dataset")
    dims = dims or default_dims(data)
    t0 = time.perf_counter()
    params = init_params(dims, mode, cfg.global_seed, 0)
    params, steps = train_steps(params, data.pairs(data.ids), cfg, SeedKey(cfg.global_seed, "slice", 0, 0))
    ledger = CostLedger()
    ledger.record(event, 0, 0, 0, steps, cfg.epochs * len(data), _now_ms(t0))
    return params, ledger


def baseline_unlearn(
    data: FeatureTable, requests: Iterable[int], cfg: TrainConfig, mode: HeadMode,
    dims: ModelDims | None = None,
) -> tuple[ModelParams, CostLedger]:
    """Delete ``requests`` and retrain the monolithic model from scratch."""
    ids = list(requests)
    if not ids:
        raise ValueError("nothing to unlearn")
    missing = [i for i in ids if i not in data]
    if missing:
        raise NotFound(missing)
    return baseline_train(data.without(ids), cfg, mode, dims, event="baseline_unlearn")
