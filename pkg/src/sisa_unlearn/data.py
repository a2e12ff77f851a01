"""Dataset ingestion, synthetic data and hashed bag-of-words features."""
from __future__ import annotations

import csv
import re
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .rng import fnv1a64, stream

DEFAULT_HASH_DIM = 4096
DEFAULT_TOKEN_CAP = 256

_TOKEN_RE = re.compile(r"[^\W_]+")


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class TaskSchema:
    name: str
    num_inputs: int
    num_classes: int
    text_columns: tuple[str, ...]
    label_column: str
    label_map: Mapping[str, int]

    def __post_init__(self):
        if self.num_inputs not in (1, 2):
            raise ValueError(f"num_inputs must be 1 or 2, got {self.num_inputs}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.text_columns) != self.num_inputs:
            raise ValueError("one text column per input required")
        if sorted(self.label_map.values()) != list(range(self.num_classes)):
            raise ValueError("label_map must be a bijection onto 0..num_classes-1")


SST2 = TaskSchema("sst2", 1, 2, ("sentence",), "label", {"0": 0, "1": 1})
QQP = TaskSchema("qqp", 2, 2, ("question1", "question2"), "is_duplicate", {"0": 0, "1": 1})
MNLI = TaskSchema(
    "mnli", 2, 3, ("premise", "hypothesis"), "gold_label",
    {"entailment": 0, "neutral": 1, "contradiction": 2},
)
SCHEMAS = {s.name: s for s in (SST2, QQP, MNLI)}


def synthetic_schema(num_classes: int, num_inputs: int = 1) -> TaskSchema:
    cols = ("text",) if num_inputs == 1 else ("text", "text2")
    return TaskSchema(
        "synthetic", num_inputs, num_classes, cols, "label",
        {str(c): c for c in range(num_classes)},
    )


@dataclass(frozen=True)
class Example:
    id: int
    texts: tuple[str, ...]
    label: int


@dataclass(frozen=True)
class Dataset:
    schema: TaskSchema
    examples: tuple[Example, ...]
    skipped: int = 0

    def __post_init__(self):
        ids = [ex.id for ex in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError("example ids must be unique")
        for ex in self.examples:
            if len(ex.texts) != self.schema.num_inputs:
                raise DataError(f"example {ex.id}: expected {self.schema.num_inputs} texts")
            if not 0 <= ex.label < self.schema.num_classes:
                raise DataError(f"example {ex.id}: label {ex.label} out of range")

    def __len__(self):
        return len(self.examples)

    @property
    def ids(self) -> list[int]:
        return [ex.id for ex in self.examples]

    def subset(self, ids: Iterable[int]) -> "Dataset":
        keep = set(ids)
        return Dataset(self.schema, tuple(ex for ex in self.examples if ex.id in keep))


def load_glue_tsv(path: str | Path, schema: TaskSchema, limit: int) -> Dataset:
    """Read the first ``limit`` usable rows of a GLUE-style TSV file.

    Rows whose label is not in ``schema.label_map`` (e.g. hidden test labels)
    or that are too short are skipped; the count is kept on the result.
    ``limit`` counts rows after filtering.
    """
    if limit <= 0:
        raise DataError("zero parseable rows requested")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    csv.field_size_limit(min(sys.maxsize, 2**31 - 1))
    examples: list[Example] = []
    skipped = 0
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        needed = (*schema.text_columns, schema.label_column)
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {missing}")
        text_pos = [header.index(c) for c in schema.text_columns]
        label_pos = header.index(schema.label_column)
        width = max(*text_pos, label_pos) + 1
        for row in reader:
            if len(row) < width or row[label_pos].strip() not in schema.label_map:
                skipped += 1
                continue
            texts = tuple(row[p] for p in text_pos)
            examples.append(Example(len(examples), texts, schema.label_map[row[label_pos].strip()]))
            if len(examples) == limit:
                break
    if not examples:
        raise DataError(f"{path}: zero parseable rows")
    return Dataset(schema, tuple(examples), skipped)


def split_train_test(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded train/test split; both halves keep ingestion order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    n = len(ds)
    n_test = int(np.floor(test_fraction * n + 0.5))
    perm = stream(seed, "split").permutation(n)
    test_mask = np.zeros(n, dtype=bool)
    test_mask[perm[:n_test]] = True
    train = tuple(ex for ex, t in zip(ds.examples, test_mask) if not t)
    test = tuple(ex for ex, t in zip(ds.examples, test_mask) if t)
    return Dataset(ds.schema, train), Dataset(ds.schema, test)


def synth_generate(
    num_classes: int,
    vocab_size: int,
    tokens_per_example: int,
    n: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Class-conditional bag-of-tokens data.

    The vocabulary is cut into one block per class. Each token comes from the
    example's own block with probability ``separation`` and from the whole
    vocabulary otherwise, so ``separation=1`` gives disjoint class vocabularies
    and ``separation=0`` makes every class the same distribution.
    """
    if n <= 0:
        raise DataError("n must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if vocab_size < num_classes:
        raise ValueError("vocab_size must be >= num_classes")
    if not 0.0 <= separation <= 1.0:
        raise ValueError("separation must lie in [0, 1]")
    g = stream(seed, "synth")
    labels = g.integers(num_classes, n)
    t = tokens_per_example
    own = g.random(n * t).reshape(n, t) < separation
    block = vocab_size // num_classes
    in_block = g.integers(block, n * t).reshape(n, t) + labels[:, None] * block
    anywhere = g.integers(vocab_size, n * t).reshape(n, t)
    tokens = np.where(own, in_block, anywhere)
    examples = tuple(
        Example(i, (" ".join(f"w{k}" for k in tokens[i]),), int(labels[i])) for i in range(n)
    )
    return Dataset(synthetic_schema(num_classes), examples)


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\r", " ").replace("\n", " ")


def write_records(ds: Dataset, path: str | Path) -> None:
    """One ``id<TAB>label<TAB>text[<TAB>text2]`` line per example."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ex in ds.examples:
            fh.write("\t".join([str(ex.id), str(ex.label), *map(_clean, ex.texts)]) + "\n")


def read_records(path: str | Path, schema: TaskSchema) -> Dataset:
    examples = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 + schema.num_inputs:
                raise DataError(f"{path}:{lineno}: expected {2 + schema.num_inputs} fields")
            examples.append(Example(int(parts[0]), tuple(parts[2:]), int(parts[1])))
    return Dataset(schema, tuple(examples))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse vector with strictly increasing indices."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float32)
        out[self.indices] = self.values
        return out


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=1 << 18)
def _token_hash(field_index: int, token: str) -> int:
    return fnv1a64(f"{field_index}\x1f{token}".encode("utf-8"))


def featurize(ex: Example, dim: int = DEFAULT_HASH_DIM, token_cap: int = DEFAULT_TOKEN_CAP) -> FeatureVector:
    if dim < 1 or dim & (dim - 1):
        raise ValueError(f"dim must be a power of two, got {dim}")
    if token_cap < 1:
        raise ValueError("token_cap must be >= 1")
    counts: dict[int, int] = {}
    for fi, text in enumerate(ex.texts):
        for tok in tokenize(text)[:token_cap]:
            j = _token_hash(fi, tok) & (dim - 1)
            counts[j] = counts.get(j, 0) + 1
    idx = np.array(sorted(counts), dtype=np.int64)
    vals = np.array([counts[j] for j in idx], dtype=np.float64)
    if vals.size:
        vals /= np.sqrt(np.dot(vals, vals))
    idx.flags.writeable = False
    vals = vals.astype(np.float32)
    vals.flags.writeable = False
    return FeatureVector(dim, idx, vals)


@dataclass(frozen=True)
class FeatureTable:
    """Featurised examples keyed by id, in ingestion order."""

    name: str
    dim: int
    num_classes: int
    ids: tuple[int, ...]
    features: Mapping[int, FeatureVector] = field(repr=False)
    labels: Mapping[int, int] = field(repr=False)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, id_):
        return id_ in self.features

    def pairs(self, ids: Sequence[int]) -> list[tuple[FeatureVector, int]]:
        return [(self.features[i], self.labels[i]) for i in ids]

    def without(self, ids: Iterable[int]) -> "FeatureTable":
        drop = set(ids)
        keep = tuple(i for i in self.ids if i not in drop)
        return FeatureTable(
            self.name, self.dim, self.num_classes, keep,
            {i: self.features[i] for i in keep}, {i: self.labels[i] for i in keep},
        )

    def subset(self, ids: Iterable[int]) -> "FeatureTable":
        keep = set(ids)
        return self.without(i for i in self.ids if i not in keep)


def featurize_dataset(ds: Dataset, dim: int = DEFAULT_HASH_DIM, token_cap: int = DEFAULT_TOKEN_CAP) -> FeatureTable:
    feats = {ex.id: featurize(ex, dim, token_cap) for ex in ds.examples}
    labels = {ex.id: ex.label for ex in ds.examples}
    return FeatureTable(ds.schema.name, dim, ds.schema.num_classes, tuple(ds.ids), feats, labels)
