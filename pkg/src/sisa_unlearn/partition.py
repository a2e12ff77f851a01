"""Shard/slice assignment of training ids and deletion bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rng import stream


class NotFound(KeyError):
    """One or more ids are not (or no longer) in the plan."""

    def __init__(self, missing: Iterable[int]):
        self.missing = sorted(missing)
        super().__init__(f"ids not in plan: {self.missing}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class UniformRandom:
    pass


@dataclass(frozen=True)
class Sequential:
    pass


@dataclass(frozen=True)
class RiskProfiled:
    """Higher risk score means more likely to be deleted later."""

    risk_scores: Mapping[int, float] = field(hash=False, compare=False)

    def __post_init__(self):
        bad = [i for i, s in self.risk_scores.items() if not np.isfinite(s)]
        if bad:
            raise ValueError(f"non-finite risk scores for ids {bad[:5]}")


PartitionStrategy = UniformRandom | Sequential | RiskProfiled


def _deal(items: Sequence[int], parts: int) -> list[list[int]]:
    """Contiguous split into ``parts`` chunks; the remainder goes to the lowest indices."""
    base, extra = divmod(len(items), parts)
    out, start = [], 0
    for k in range(parts):
        size = base + (1 if k < extra else 0)
        out.append(list(items[start:start + size]))
        start += size
    return out


@dataclass(frozen=True)
class PartitionPlan:
    num_shards: int
    num_slices: int
    slices: tuple[tuple[tuple[int, ...], ...], ...]

    @cached_property
    def index(self) -> dict[int, tuple[int, int, int]]:
        return {
            id_: (s, r, pos)
            for s, shard in enumerate(self.slices)
            for r, sl in enumerate(shard)
            for pos, id_ in enumerate(sl)
        }

    def __len__(self):
        return len(self.index)

    def __contains__(self, id_):
        return id_ in self.index

    def slice_ids(self, shard: int, slice_: int) -> tuple[int, ...]:
        return self.slices[shard][slice_]

    def shard_ids(self, shard: int, upto: int | None = None) -> list[int]:
        """Ids of slices ``0..upto`` (all slices by default) in plan order."""
        stop = self.num_slices if upto is None else upto + 1
        return [i for sl in self.slices[shard][:stop] for i in sl]

    def ordered_ids(self) -> list[int]:
        """Live ids in (shard, slice, position) order."""
        return [i for shard in self.slices for sl in shard for i in sl]

    def shard_sizes(self) -> list[int]:
        return [sum(len(sl) for sl in shard) for shard in self.slices]


def make_plan(
    ids: Sequence[int],
    num_shards: int,
    num_slices: int,
    strategy: PartitionStrategy = UniformRandom(),
    seed: int = 0,
) -> PartitionPlan:
    """Deal ``ids`` into ``num_shards`` x ``num_slices`` slices.

    Uniform and risk-profiled plans shuffle with the ``(seed, "plan")``
    stream before dealing shards; sequential plans keep input order.
    Risk-profiled plans then sort each shard by ascending risk (ties by id)
    so the riskiest ids sit in the last slices.
    """
    if num_shards < 1 or num_slices < 1:
        raise ValueError("num_shards and num_slices must be >= 1")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if len(ids) < num_shards * num_slices:
        raise ValueError(f"{len(ids)} ids cannot fill {num_shards}x{num_slices} slices")
    if isinstance(strategy, RiskProfiled):
        missing = [i for i in ids if i not in strategy.risk_scores]
        if missing:
            raise ValueError(f"no risk score for ids {missing[:5]}")
    if not isinstance(strategy, Sequential):
        perm = stream(seed, "plan").permutation(len(ids))
        ids = [ids[k] for k in perm]
    shards = _deal(ids, num_shards)
    if isinstance(strategy, RiskProfiled):
        scores = strategy.risk_scores
        shards = [sorted(sh, key=lambda i: (scores[i], i)) for sh in shards]
    slices = tuple(tuple(tuple(sl) for sl in _deal(sh, num_slices)) for sh in shards)
    return PartitionPlan(num_shards, num_slices, slices)


def locate(plan: PartitionPlan, id_: int) -> tuple[int, int, int]:
    try:
        return plan.index[id_]
    except KeyError:
        raise NotFound([id_]) from None


def remove(plan: PartitionPlan, ids: Iterable[int]) -> tuple[PartitionPlan, dict[int, int]]:
    """Drop ``ids``; returns the new plan and {shard: earliest affected slice}.

    Survivors keep their slice and relative order. Nothing changes if any id
    is missing.
    """
    ids = set(ids)
    missing = [i for i in ids if i not in plan.index]
    if missing:
        raise NotFound(missing)
    if not ids:
        return plan, {}
    affected: dict[int, int] = {}
    for i in ids:
        s, r, _ = plan.index[i]
        affected[s] = min(r, affected.get(s, r))
    slices = tuple(
        shard if s not in affected else tuple(tuple(i for i in sl if i not in ids) for sl in shard)
        for s, shard in enumerate(plan.slices)
    )
    return PartitionPlan(plan.num_shards, plan.num_slices, slices), dict(sorted(affected.items()))


def write_plan(plan: PartitionPlan, path: str | Path) -> None:
    """``id<TAB>shard<TAB>slice<TAB>position`` sorted by location, after a shape header."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# shards={plan.num_shards} slices={plan.num_slices}\n")
        for s, shard in enumerate(plan.slices):
            for r, sl in enumerate(shard):
                for pos, id_ in enumerate(sl):
                    fh.write(f"{id_}\t{s}\t{r}\t{pos}\n")


def read_plan(path: str | Path) -> PartitionPlan:
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing plan header")
        shape = dict(kv.split("=") for kv in header[1:].split())
        S, R = int(shape["shards"]), int(shape["slices"])
        cells: list[list[list[tuple[int, int]]]] = [[[] for _ in range(R)] for _ in range(S)]
        for line in fh:
            id_, s, r, pos = map(int, line.split("\t"))
            cells[s][r].append((pos, id_))
    slices = tuple(
        tuple(tuple(i for _, i in sorted(cell)) for cell in shard) for shard in cells
    )
    return PartitionPlan(S, R, slices)
