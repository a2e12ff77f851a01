"""Deletion-request streams under uniform, Pareto and mirrored-Pareto profiles."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .partition import PartitionPlan
from .rng import stream

PARETO_M = 1.0
PARETO_A = 1.16
CAP_QUANTILE = 0.999


@dataclass(frozen=True)
class RequestDistribution:
    kind: str = "uniform"  # uniform | pareto | inverse_pareto
    m: float = PARETO_M
    a: float = PARETO_A

    def __post_init__(self):
        kind = self.kind.replace("-", "_").lower()
        if kind not in ("uniform", "pareto", "inverse_pareto"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not (self.m > 0 and self.a > 0):
            raise ValueError("Pareto parameters m and a must be > 0")

    def __str__(self):
        return self.kind if self.kind == "uniform" else f"{self.kind}(m={self.m:g},a={self.a:g})"


UNIFORM = RequestDistribution("uniform")
PARETO = RequestDistribution("pareto")
INVERSE_PARETO = RequestDistribution("inverse_pareto")


def pareto_quantile(u: float, m: float = PARETO_M, a: float = PARETO_A) -> float:
    """Inverse CDF of Pareto(m, a): ``m / (1 - u) ** (1 / a)``."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    return m / (1.0 - u) ** (1.0 / a)


def position_of(x: float, n: int, m: float = PARETO_M, a: float = PARETO_A) -> int:
    """Map a Pareto draw onto a 1-based position in ``1..n``.

    ``[m, cap]`` is scaled linearly onto ``[0, n]`` and rounded up, where
    ``cap`` is the 99.9th percentile; draws beyond the cap land on ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cap = pareto_quantile(CAP_QUANTILE, m, a)
    p = math.ceil((x - m) * n / (cap - m))
    return min(max(p, 1), n)


def draw_positions(n: int, dist: RequestDistribution, count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. 1-based positions over ``n`` slots (with replacement)."""
    u = stream(seed, "requests").random(count)
    if dist.kind == "uniform":
        return np.minimum(np.floor(u * n).astype(np.int64) + 1, n)
    p = np.array([position_of(pareto_quantile(x, dist.m, dist.a), n, dist.m, dist.a) for x in u],
                 dtype=np.int64)
    return n + 1 - p if dist.kind == "inverse_pareto" else p


@dataclass(frozen=True)
class RequestStream:
    ids: tuple[int, ...]
    seed: int
    distribution: RequestDistribution

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def sample_requests(
    plan: PartitionPlan, dist: RequestDistribution, n: int, seed: int, max_draws: int | None = None
) -> RequestStream:
    """``n`` distinct live ids; positions follow ``dist`` in plan order.

    Repeated positions are redrawn. The draw sequence is the same one
    :func:`draw_positions` produces, so streams with the same seed mirror
    each other between the Pareto and inverse-Pareto profiles.
    """
    order = plan.ordered_ids()
    total = len(order)
    if n > total:
        raise ValueError(f"cannot sample {n} requests from {total} live ids")
    if n <= 0:
        return RequestStream((), seed, dist)
    if max_draws is None:
        max_draws = max(10_000, 1000 * total)
    chosen: list[int] = []
    seen: set[int] = set()
    drawn = 0
    batch = max(2 * n, 64)
    while len(chosen) < n:
        if drawn >= max_draws:
            raise RuntimeError(f"gave up after {drawn} draws with {len(chosen)}/{n} distinct ids")
        # Regenerate the prefix so the i-th draw is identical however many are needed.
        positions = draw_positions(total, dist, drawn + batch, seed)[drawn:]
        drawn += batch
        for p in positions:
            if p not in seen:
                seen.add(int(p))
                chosen.append(order[p - 1])
                if len(chosen) == n:
                    break
        batch *= 2
    return RequestStream(tuple(chosen), seed, dist)


def write_requests(rs: RequestStream, path: str | Path) -> None:
    d = rs.distribution
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# distribution={d.kind} m={d.m!r} a={d.a!r} seed={rs.seed}\n")
        for i in rs.ids:
            fh.write(f"{i}\n")


def read_requests(path: str | Path) -> RequestStream:
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing request header")
        meta = dict(kv.split("=", 1) for kv in header[1:].split())
        ids = tuple(int(line) for line in fh if line.strip())
    dist = RequestDistribution(meta["distribution"], float(meta["m"]), float(meta["a"]))
    return RequestStream(ids, int(meta["seed"]), dist)
