"""Single-hidden-layer classifier over a shared random backbone.

Three trainable-block layouts:

* ``full``    -- backbone (W1, b1) and classifier head are updated;
* ``fc``      -- only the head is updated (final-layer-only fine-tuning);
* ``adapter`` -- a residual bottleneck adapter plus the head are updated.

Forward pass: ``h = relu(W1 x + b1)``, ``z = h + up(relu(down(h)))`` (adapter
term only in adapter mode), ``logits = head(z)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureVector
from .rng import SeedKey, stream

# Backbone init bound: unit-variance pre-activations for L2-normalised inputs.
BACKBONE_INIT_BOUND = math.sqrt(3.0)
ADAPTER_BUDGET = 0.05
DEFAULT_HIDDEN = 256
DEFAULT_BOTTLENECK = 16

# Fixed bytes around the payload in a checkpoint file (see store.py).
CHECKPOINT_OVERHEAD_BYTES = 21 + 16


class ModeKind(IntEnum):
    FULL = 0
    FC_ONLY = 1
    ADAPTER = 2


MODE_NAMES = {ModeKind.FULL: "full", ModeKind.FC_ONLY: "fc", ModeKind.ADAPTER: "adapter"}


class AdapterBudgetError(ValueError):
    """Adapter mode would train more than the allowed share of parameters."""


@dataclass(frozen=True)
class HeadMode:
    kind: ModeKind
    bottleneck: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModeKind(self.kind))
        if self.kind is ModeKind.ADAPTER and self.bottleneck < 1:
            raise ValueError("adapter bottleneck must be >= 1")
        if self.kind is not ModeKind.ADAPTER and self.bottleneck != 0:
            raise ValueError("bottleneck only applies to adapter mode")

    @classmethod
    def full(cls) -> "HeadMode":
        return cls(ModeKind.FULL)

    @classmethod
    def fc_only(cls) -> "HeadMode":
        return cls(ModeKind.FC_ONLY)

    @classmethod
    def adapter(cls, bottleneck: int = DEFAULT_BOTTLENECK) -> "HeadMode":
        return cls(ModeKind.ADAPTER, bottleneck)

    @classmethod
    def parse(cls, text: str, bottleneck: int = DEFAULT_BOTTLENECK) -> "HeadMode":
        """Accepts ``full``, ``fc``/``fc_only``, ``adapter`` or ``adapter:<k>``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "full":
            return cls.full()
        if name in ("fc", "fc_only", "fconly"):
            return cls.fc_only()
        if name == "adapter":
            return cls.adapter(int(arg) if arg else bottleneck)
        raise ValueError(f"unknown mode {text!r}")

    @property
    def name(self) -> str:
        return MODE_NAMES[self.kind]

    def __str__(self):
        return f"adapter:{self.bottleneck}" if self.kind is ModeKind.ADAPTER else self.name


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden: int = DEFAULT_HIDDEN
    num_classes: int = 2

    def __post_init__(self):
        if min(self.input_dim, self.hidden, self.num_classes) < 1:
            raise ValueError(f"invalid dims {self}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 16
    epochs: int = 10
    global_seed: int = 0
    # Slice step r trains on slices 0..r instead of slice r alone.
    cumulative: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def block_shapes(dims: ModelDims, mode: HeadMode) -> list[tuple[str, tuple[int, ...]]]:
    """Trainable blocks in checkpoint payload order."""
    h, c = dims.hidden, dims.num_classes
    head = [("head_w", (c, h)), ("head_b", (c,))]
    if mode.kind is ModeKind.FULL:
        return [("w1", (h, dims.input_dim)), ("b1", (h,)), *head]
    if mode.kind is ModeKind.FC_ONLY:
        return head
    b = mode.bottleneck
    return [("down_w", (b, h)), ("down_b", (b,)), ("up_w", (h, b)), ("up_b", (h,)), *head]


def trainable_count(dims: ModelDims, mode: HeadMode) -> int:
    return sum(math.prod(shape) for _, shape in block_shapes(dims, mode))


def param_footprint(dims: ModelDims, mode: HeadMode) -> tuple[int, int]:
    """(trainable parameter count, checkpoint file size in bytes)."""
    n = trainable_count(dims, mode)
    return n, 4 * n + CHECKPOINT_OVERHEAD_BYTES


@dataclass(frozen=True, eq=False)
class ModelParams:
    dims: ModelDims
    mode: HeadMode
    blocks: Mapping[str, np.ndarray]

    def trainable_slice(self) -> dict[str, np.ndarray]:
        return {name: self.blocks[name] for name, _ in block_shapes(self.dims, self.mode)}

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.trainable_slice().values()]).astype(
            np.float32, copy=False
        )

    def with_trainable(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat)
        expected = trainable_count(self.dims, self.mode)
        if flat.shape != (expected,):
            raise ValueError(f"payload has {flat.size} values, expected {expected}")
        blocks = dict(self.blocks)
        offset = 0
        for name, shape in block_shapes(self.dims, self.mode):
            size = math.prod(shape)
            blocks[name] = flat[offset:offset + size].reshape(shape).astype(np.float32, copy=True)
            offset += size
        return ModelParams(self.dims, self.mode, blocks)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.dims, self.mode, {k: v.astype(dtype) for k, v in self.blocks.items()})

    def backbone_bytes(self) -> bytes:
        return self.blocks["w1"].tobytes() + self.blocks["b1"].tobytes()


@lru_cache(maxsize=8)
def _backbone(input_dim: int, hidden: int, global_seed: int) -> tuple[np.ndarray, np.ndarray]:
    g = stream(global_seed, "backbone")
    s = BACKBONE_INIT_BOUND
    w1 = g.uniform(-s, s, hidden * input_dim).astype(np.float32).reshape(hidden, input_dim)
    b1 = g.uniform(-s, s, hidden).astype(np.float32)
    w1.flags.writeable = False
    b1.flags.writeable = False
    return w1, b1


def init_params(
    dims: ModelDims,
    mode: HeadMode,
    global_seed: int,
    shard: int = 0,
    *,
    check_budget: bool = True,
) -> ModelParams:
    """Fresh parameters: shared backbone plus per-shard trainable blocks.

    Raises :class:`AdapterBudgetError` when adapter mode would train more than
    5% of the full-mode parameter count (skip with ``check_budget=False``).
    """
    if check_budget and mode.kind is ModeKind.ADAPTER:
        ratio = trainable_count(dims, mode) / trainable_count(dims, HeadMode.full())
        if ratio > ADAPTER_BUDGET:
            raise AdapterBudgetError(
                f"adapter trains {ratio:.2%} of full-mode parameters (limit {ADAPTER_BUDGET:.0%})"
            )
    w1, b1 = _backbone(dims.input_dim, dims.hidden, global_seed)
    blocks: dict[str, np.ndarray] = {"w1": w1, "b1": b1}
    g = stream(global_seed, "init", shard)
    fan_in = {"head_w": dims.hidden, "down_w": dims.hidden, "up_w": mode.bottleneck}
    for name, shape in block_shapes(dims, mode):
        if name in ("w1", "b1"):
            continue
        bound = 1.0 / math.sqrt(fan_in[name[:-2] + "_w"])
        blocks[name] = g.uniform(-bound, bound, math.prod(shape)).astype(np.float32).reshape(shape)
    return ModelParams(dims, mode, blocks)


def params_from_flat(dims: ModelDims, mode: HeadMode, global_seed: int, flat: np.ndarray) -> ModelParams:
    """Rebuild parameters from a checkpoint payload and the seed-derived backbone."""
    w1, b1 = _backbone(dims.input_dim, dims.hidden, global_seed)
    return ModelParams(dims, mode, {"w1": w1, "b1": b1}).with_trainable(flat)


def _hidden_rows(w1: np.ndarray, b1: np.ndarray, fvs: Sequence[FeatureVector]) -> np.ndarray:
    out = np.empty((len(fvs), w1.shape[0]), dtype=w1.dtype)
    for i, fv in enumerate(fvs):
        out[i] = w1[:, fv.indices] @ fv.values + b1
    np.maximum(out, 0, out=out)
    return out


def _compress(fvs: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    """Union of active columns and the batch restricted to them."""
    cols = np.unique(np.concatenate([fv.indices for fv in fvs]))
    xb = np.zeros((len(fvs), cols.size), dtype=np.float32)
    for i, fv in enumerate(fvs):
        xb[i, np.searchsorted(cols, fv.indices)] = fv.values
    return cols, xb


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # Ascending in-batch order, independent of numpy's reduction strategy.
    acc = terms[0].copy()
    for t in terms[1:]:
        acc += t
    return acc


def _head_forward(blocks, kind: ModeKind, h: np.ndarray):
    if kind is ModeKind.ADAPTER:
        a = np.maximum(h @ blocks["down_w"].T + blocks["down_b"], 0)
        z = h + a @ blocks["up_w"].T + blocks["up_b"]
    else:
        a, z = None, h
    return a, z, z @ blocks["head_w"].T + blocks["head_b"]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_loss_and_grads(
    params: ModelParams,
    labels: np.ndarray,
    *,
    cols: np.ndarray | None = None,
    xb: np.ndarray | None = None,
    h: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over one batch and its gradients.

    Full mode needs the compressed inputs ``cols``/``xb`` (``xb[i, j]`` is the
    value of column ``cols[j]`` in example ``i``); the returned ``w1``
    gradient covers only those columns. Frozen-backbone modes take the hidden
    activations ``h`` directly.
    """
    blocks = params.blocks
    kind = params.mode.kind
    labels = np.asarray(labels)
    if kind is ModeKind.FULL:
        w1c = blocks["w1"][:, cols]
        pre = xb @ w1c.T + blocks["b1"]
        h = np.maximum(pre, 0)
    n = h.shape[0]
    a, z, logits = _head_forward(blocks, kind, h)
    p = _softmax(logits)
    rows = np.arange(n)
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    loss = float(np.mean(np.log(np.exp(shifted).sum(axis=1)) - shifted[rows, labels]))

    g = p.copy()
    g[rows, labels] -= 1
    g /= n
    grads = {
        "head_w": _ordered_sum(g[:, :, None] * z[:, None, :]),
        "head_b": _ordered_sum(g),
    }
    gz = g @ blocks["head_w"]
    if kind is ModeKind.ADAPTER:
        grads["up_w"] = _ordered_sum(gz[:, :, None] * a[:, None, :])
        grads["up_b"] = _ordered_sum(gz)
        ga = (gz @ blocks["up_w"]) * (a > 0)
        grads["down_w"] = _ordered_sum(ga[:, :, None] * h[:, None, :])
        grads["down_b"] = _ordered_sum(ga)
    elif kind is ModeKind.FULL:
        dpre = gz * (pre > 0)
        gw1 = np.zeros_like(w1c)
        for i in range(n):
            nz = np.flatnonzero(xb[i])
            gw1[:, nz] += np.outer(dpre[i], xb[i, nz])
        grads["w1"] = gw1
        grads["b1"] = _ordered_sum(dpre)
    return loss, grads


def train_steps(
    params: ModelParams,
    data: Sequence[tuple[FeatureVector, int]],
    cfg: TrainConfig,
    step_key: SeedKey,
    epoch_losses: list[float] | None = None,
) -> tuple[ModelParams, int]:
    """Plain minibatch SGD over ``data`` for ``cfg.epochs`` epochs.

    Epoch ``e`` visits ``data`` in the permutation drawn from
    ``step_key.child(e)``. Only the mode's trainable blocks change; the
    result is bit-reproducible from the arguments.
    """
    if not data:
        raise ValueError("train_steps needs at least one example")
    kind = params.mode.kind
    blocks = dict(params.blocks)
    for name in params.trainable_slice():
        blocks[name] = blocks[name].copy()
    work = ModelParams(params.dims, params.mode, blocks)
    lr = blocks["head_w"].dtype.type(cfg.learning_rate)

    fvs = [fv for fv, _ in data]
    for fv in fvs:
        if fv.dim != params.dims.input_dim:
            raise ValueError(f"feature dim {fv.dim} != input_dim {params.dims.input_dim}")
    labels = np.array([y for _, y in data], dtype=np.int64)
    h_all = None if kind is ModeKind.FULL else _hidden_rows(blocks["w1"], blocks["b1"], fvs)

    n, bs = len(data), cfg.batch_size
    steps = 0
    for epoch in range(cfg.epochs):
        order = step_key.child(epoch).generator().permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if kind is ModeKind.FULL:
                cols, xb = _compress([fvs[i] for i in idx])
                loss, grads = batch_loss_and_grads(work, labels[idx], cols=cols, xb=xb)
                blocks["w1"][:, cols] -= lr * grads.pop("w1")
            else:
                loss, grads = batch_loss_and_grads(work, labels[idx], h=h_all[idx])
            for name, grad in grads.items():
                blocks[name] -= lr * grad
            total += loss * idx.size
            steps += 1
        if epoch_losses is not None:
            epoch_losses.append(total / n)
    return work, steps


def predict_proba_batch(params: ModelParams, fvs: Sequence[FeatureVector]) -> np.ndarray:
    for fv in fvs:
        if fv.dim != params.dims.input_dim:
            raise ValueError(f"feature dim {fv.dim} != input_dim {params.dims.input_dim}")
    if not fvs:
        return np.zeros((0, params.dims.num_classes), dtype=np.float32)
    h = _hidden_rows(params.blocks["w1"], params.blocks["b1"], fvs)
    return _softmax(_head_forward(params.blocks, params.mode.kind, h)[2])


def predict_proba(params: ModelParams, x: FeatureVector) -> np.ndarray:
    return predict_proba_batch(params, [x])[0]
