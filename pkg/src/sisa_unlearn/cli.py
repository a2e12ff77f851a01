"""Command-line driver. A run directory holds all state for one experiment::

    run/
      config                  frozen key = value settings
      data/schema             task, num_inputs, num_classes
      data/train.tsv          surviving training records
      data/test.tsv
      plan.tsv
      checkpoints/            shard<S>_slice<R>.ckpt
      models/                 shard<S>.ckpt (current constituent models)
      ledger.csv
      requests/               request streams and applied.tsv
      reports/

Exit codes: 0 success, 1 usage error, 2 data error, 3 state error.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import filelock

from .data import (
    SCHEMAS,
    DataError,
    Dataset,
    FeatureTable,
    featurize_dataset,
    load_glue_tsv,
    read_records,
    split_train_test,
    synth_generate,
    synthetic_schema,
    write_records,
)
from .engine import CostLedger, Ensemble, train_all, unlearn
from .learner import AdapterBudgetError, HeadMode, ModelDims, TrainConfig, params_from_flat
from .metrics import (
    ACCURACY_COLUMNS,
    BASELINE_COLUMNS,
    MEMORY_COLUMNS,
    RETRAIN_COLUMNS,
    ExperimentGrid,
    evaluate,
    risk_scores,
    run_experiment,
    write_csv,
)
from .partition import NotFound, RiskProfiled, Sequential, UniformRandom, make_plan, read_plan, write_plan
from .requests import RequestDistribution, read_requests, sample_requests, write_requests
from .store import Checkpoint, CheckpointStore, StoreError, read_checkpoint_file, storage_report, write_checkpoint_file

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_STATE = 0, 1, 2, 3
CONFIG_ENV = "SISA_CONFIG_DIR"


class UsageError(Exception):
    pass


class StateError(Exception):
    pass


def _opt(default, help):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class RunConfig:
    dataset: str = _opt("synthetic", "GLUE-style TSV path, or 'synthetic'")
    task: str = _opt("sst2", "schema for a TSV dataset: sst2 | qqp | mnli")
    limit: int = _opt(10000, "rows to ingest (synthetic: examples to generate)")
    test_fraction: float = _opt(0.2, "held-out share of ingested rows")
    synth_classes: int = _opt(2, "synthetic: number of classes")
    synth_vocab: int = _opt(1000, "synthetic: vocabulary size")
    synth_tokens: int = _opt(20, "synthetic: tokens per example")
    synth_separation: float = _opt(0.8, "synthetic: chance a token comes from its class block")
    shards: int = _opt(5, "number of shards S")
    slices: int = _opt(16, "slices per shard R")
    strategy: str = _opt("uniform", "plan strategy: uniform | sequential | risk")
    mode: str = _opt("adapter", "trainable parameters: full | fc | adapter")
    learning_rate: float = _opt(5e-3, "SGD step size")
    batch: int = _opt(16, "minibatch size")
    epochs: int = _opt(10, "epochs per slice step")
    hash_dim: int = _opt(4096, "hashed feature dimension (power of two)")
    hidden: int = _opt(256, "hidden width")
    bottleneck: int = _opt(16, "adapter bottleneck width")
    token_cap: int = _opt(256, "tokens kept per example")
    slice_mode: str = _opt("per-slice", "slice step trains on: per-slice | cumulative")
    seed: int = _opt(0, "global seed (split, plan, init, requests)")
    distribution: str = _opt("uniform", "request profile: uniform | pareto | inverse_pareto")
    m: float = _opt(1.0, "Pareto scale")
    a: float = _opt(1.16, "Pareto shape")
    num_requests: int = _opt(16, "requests to draw")
    data_fraction: float = _opt(1.0, "simulate: share of training data used, in (0, 1]")
    grid_slices: str = _opt("2,4,8,16", "simulate: comma-separated slice counts")
    grid_requests: str = _opt("16", "simulate: request counts to evaluate at")
    grid_seeds: str = _opt("0", "simulate: comma-separated seeds")
    grid_distributions: str = _opt("uniform", "simulate: comma-separated request profiles")
    vote: str = _opt("hard", "ensemble aggregation: hard | soft")
    workers: int = _opt(1, "threads for shard training")
    timing: bool = _opt(True, "record wall-clock ms (off gives byte-stable CSVs)")

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name != "seed" and not v > 0:
                raise UsageError(f"{f.name} must be positive, got {v}")
        if self.seed < 0:
            raise UsageError("seed must be >= 0")
        if not 0 < self.data_fraction <= 1:
            raise UsageError("data_fraction must lie in (0, 1]")
        if not 0 < self.test_fraction < 1:
            raise UsageError("test_fraction must lie in (0, 1)")
        if not 0 <= self.synth_separation <= 1:
            raise UsageError("synth_separation must lie in [0, 1]")
        if self.hash_dim & (self.hash_dim - 1):
            raise UsageError("hash_dim must be a power of two")
        if self.dataset != "synthetic" and self.task not in SCHEMAS:
            raise UsageError(f"unknown task {self.task!r}; choose from {', '.join(SCHEMAS)}")
        choices = {
            "strategy": ("uniform", "sequential", "risk"),
            "slice_mode": ("per-slice", "cumulative"),
            "vote": ("hard", "soft"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {', '.join(allowed)}")
        try:
            self.head_mode
            self.request_distribution
            self.grid()
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    @property
    def head_mode(self) -> HeadMode:
        return HeadMode.parse(self.mode, self.bottleneck)

    @property
    def request_distribution(self) -> RequestDistribution:
        return RequestDistribution(self.distribution, self.m, self.a)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch, self.epochs,
                           self.seed if seed is None else seed, self.slice_mode == "cumulative")

    def dims(self, num_classes: int) -> ModelDims:
        return ModelDims(self.hash_dim, self.hidden, num_classes)

    def grid(self) -> ExperimentGrid:
        def ints(text):
            return tuple(int(x) for x in text.split(",") if x.strip())
        dists = tuple(RequestDistribution(k.strip(), self.m, self.a)
                      for k in self.grid_distributions.split(",") if k.strip())
        return ExperimentGrid(ints(self.grid_slices), ints(self.grid_requests), dists, ints(self.grid_seeds))


FIELDS = {f.name: f for f in fields(RunConfig)}
INGEST_KEYS = ("dataset", "task", "limit", "test_fraction", "synth_classes", "synth_vocab",
               "synth_tokens", "synth_separation", "seed")
TRAIN_KEYS = ("shards", "slices", "strategy", "mode", "learning_rate", "batch", "epochs",
              "hash_dim", "hidden", "bottleneck", "token_cap", "slice_mode")
# Recorded in the run directory; only INGEST_KEYS and TRAIN_KEYS are ever pinned.
PERSISTED_KEYS = INGEST_KEYS + TRAIN_KEYS + ("timing",)


def _coerce(key: str, raw: str):
    kind = FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        if key not in FIELDS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


def format_config(cfg: RunConfig, keys: Sequence[str] | None = None) -> str:
    keys = keys or list(FIELDS)
    return "".join(f"{k} = {str(getattr(cfg, k)).lower() if FIELDS[k].type == 'bool' else getattr(cfg, k)}\n"
                   for k in keys)


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.config = self.root / "config"
        self.data = self.root / "data"
        self.schema = self.data / "schema"
        self.train = self.data / "train.tsv"
        self.test = self.data / "test.tsv"
        self.plan = self.root / "plan.tsv"
        self.checkpoints = self.root / "checkpoints"
        self.models = self.root / "models"
        self.ledger = self.root / "ledger.csv"
        self.requests = self.root / "requests"
        self.applied = self.requests / "applied.tsv"
        self.reports = self.root / "reports"

    def has_data(self) -> bool:
        return self.train.is_file() and self.test.is_file() and self.schema.is_file()

    def has_models(self) -> bool:
        return self.models.is_dir() and any(self.models.glob("shard*.ckpt"))

    def require_data(self) -> None:
        if not self.has_data():
            raise StateError(f"{self.root}: no ingested data; run `ingest` first")

    def require_models(self) -> None:
        if not self.has_models():
            raise StateError(f"{self.root}: no models found; run `train` first")

    def model_path(self, shard: int) -> Path:
        return self.models / f"shard{shard}.ckpt"

    def read_schema(self):
        meta = dict(line.split("=", 1) for line in self.schema.read_text(encoding="utf-8").split())
        if meta["task"] in SCHEMAS:
            return SCHEMAS[meta["task"]]
        return synthetic_schema(int(meta["num_classes"]), int(meta["num_inputs"]))

    def load_split(self, which: str) -> Dataset:
        return read_records(self.train if which == "train" else self.test, self.read_schema())

    def applied_rows(self) -> list[tuple[int, int, str]]:
        if not self.applied.is_file():
            return []
        with self.applied.open(encoding="utf-8", newline="") as fh:
            return [(int(r[0]), int(r[1]), r[2]) for r in csv.reader(fh, delimiter="\t")]


def resolve_config(args: argparse.Namespace, run: RunDir) -> RunConfig:
    """defaults < config file < run-dir config < explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    elif os.environ.get(CONFIG_ENV):
        default = Path(os.environ[CONFIG_ENV]) / "default.conf"
        if default.is_file():
            values.update(read_config_file(default))
    stored = read_config_file(run.config) if run.config.is_file() else {}
    values.update(stored)
    explicit = {k: v for k, v in vars(args).items() if k in FIELDS}
    frozen = set()
    if run.has_data():
        frozen.update(INGEST_KEYS)
    if run.has_models() and args.command != "simulate":
        frozen.update(TRAIN_KEYS)
    for key, value in explicit.items():
        if key in frozen and key in stored and stored[key] != value:
            raise StateError(
                f"--{key.replace('_', '-')}={value} conflicts with {stored[key]} recorded in {run.config}; "
                "use a fresh run directory"
            )
    values.update(explicit)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, run: RunDir, keys: Sequence[str]) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(format_config(cfg, keys), encoding="utf-8")


def _features(cfg: RunConfig, ds: Dataset) -> FeatureTable:
    return featurize_dataset(ds, cfg.hash_dim, cfg.token_cap)


def load_ensemble(cfg: RunConfig, run: RunDir, num_classes: int) -> Ensemble:
    run.require_models()
    mode, dims = cfg.head_mode, cfg.dims(num_classes)
    models = []
    for s in range(cfg.shards):
        path = run.model_path(s)
        if not path.is_file():
            raise StateError(f"{run.root}: model for shard {s} is missing")
        cp = read_checkpoint_file(path)
        if cp.mode != mode:
            raise StateError(f"{path}: mode {cp.mode} does not match configured {mode}")
        models.append(params_from_flat(dims, mode, cfg.seed, cp.payload))
    return Ensemble(tuple(models), cfg.vote)


def _save_model(run: RunDir, plan, params, shard: int) -> None:
    cp = Checkpoint.create(shard, plan.num_slices - 1, params.mode, params.flat_trainable(),
                           plan.shard_ids(shard))
    write_checkpoint_file(run.model_path(shard), cp)


def cmd_ingest(cfg: RunConfig, run: RunDir, args) -> None:
    if cfg.dataset == "synthetic":
        ds = synth_generate(cfg.synth_classes, cfg.synth_vocab, cfg.synth_tokens, cfg.limit,
                            cfg.synth_separation, cfg.seed)
        task, schema = "synthetic", ds.schema
    else:
        path = Path(cfg.dataset)
        if not path.is_file():
            raise DataError(f"dataset not found: {path}")
        schema = SCHEMAS[cfg.task]
        ds = load_glue_tsv(path, schema, cfg.limit)
        task = schema.name
    train, test = split_train_test(ds, cfg.test_fraction, cfg.seed)
    # Deletions already applied to this run stay deleted.
    forgotten = {i for _, i, _ in run.applied_rows()}
    if forgotten:
        train = train.subset(i for i in train.ids if i not in forgotten)
    run.data.mkdir(parents=True, exist_ok=True)
    run.schema.write_text(f"task={task}\nnum_inputs={schema.num_inputs}\nnum_classes={schema.num_classes}\n",
                          encoding="utf-8")
    write_records(train, run.train)
    write_records(test, run.test)
    save_config(cfg, run, PERSISTED_KEYS)
    print(f"ingested {len(ds)} rows ({ds.skipped} skipped): {len(train)} train, {len(test)} test")


def _strategy(cfg: RunConfig, ids):
    if cfg.strategy == "sequential":
        return Sequential()
    if cfg.strategy == "risk":
        return RiskProfiled(risk_scores(ids, cfg.seed))
    return UniformRandom()


def cmd_train(cfg: RunConfig, run: RunDir, args) -> None:
    run.require_data()
    table = _features(cfg, run.load_split("train"))
    plan = make_plan(table.ids, cfg.shards, cfg.slices, _strategy(cfg, table.ids), cfg.seed)
    for d in (run.checkpoints, run.models):
        d.mkdir(parents=True, exist_ok=True)
        for stale in d.glob("*.ckpt"):
            stale.unlink()
    store = CheckpointStore(run.checkpoints)
    ens, ledger = train_all(plan, table, cfg.train_config(), cfg.head_mode, store,
                            cfg.dims(table.num_classes), workers=cfg.workers, vote=cfg.vote)
    write_plan(plan, run.plan)
    for s, params in enumerate(ens.models):
        _save_model(run, plan, params, s)
    ledger.write_csv(run.ledger, timing=cfg.timing)
    save_config(cfg, run, PERSISTED_KEYS)
    print(f"trained {cfg.shards} shards x {cfg.slices} slices on {len(table)} examples: "
          f"{ledger.gradient_steps} gradient steps, {store.total_bytes()} checkpoint bytes")


def cmd_request(cfg: RunConfig, run: RunDir, args) -> None:
    run.require_models()
    plan = read_plan(run.plan)
    dist = cfg.request_distribution
    rs = sample_requests(plan, dist, cfg.num_requests, cfg.seed)
    out = Path(args.out) if args.out else run.requests / f"{dist.kind}_seed{cfg.seed}_n{cfg.num_requests}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_requests(rs, out)
    print(f"wrote {len(rs)} requests to {out}")


def cmd_unlearn(cfg: RunConfig, run: RunDir, args) -> None:
    run.require_data()
    run.require_models()
    if bool(args.request_file) == bool(args.ids):
        raise UsageError("give exactly one of --request-file or --ids")
    if args.request_file:
        if not Path(args.request_file).is_file():
            raise DataError(f"request file not found: {args.request_file}")
        rs = read_requests(args.request_file)
        ids, source = list(rs.ids), rs.distribution.kind
    else:
        try:
            ids = [int(x) for x in args.ids.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--ids must be comma-separated integers, got {args.ids!r}") from None
        source = "manual"
    applied = run.applied_rows()
    done = {i for _, i, _ in applied}
    todo = list(dict.fromkeys(i for i in ids if i not in done))
    if not todo:
        print("nothing to unlearn: every request was already applied")
        return
    plan = read_plan(run.plan)
    missing = [i for i in todo if i not in plan]
    if missing:
        raise NotFound(missing)
    train = run.load_split("train")
    table = _features(cfg, train)
    if set(table.ids) != set(plan.ordered_ids()):
        raise StateError(f"{run.root}: training data and plan disagree; retrain the run")
    ens = load_ensemble(cfg, run, table.num_classes)
    store = CheckpointStore(run.checkpoints)
    tcfg, mode = cfg.train_config(), cfg.head_mode
    total = CostLedger()
    run.requests.mkdir(parents=True, exist_ok=True)
    for k, rid in enumerate(todo, len(applied) + 1):
        ens, plan, led = unlearn(ens, store, plan, table, [rid], tcfg, mode)
        for ev in led.events:
            _save_model(run, plan, ens.models[ev.shard], ev.shard)
        write_plan(plan, run.plan)
        led.write_csv(run.ledger, timing=cfg.timing, append=True)
        with run.applied.open("a", encoding="utf-8", newline="") as fh:
            fh.write(f"{k}\t{rid}\t{source}\n")
        total = total.merge(led)
    gone = set(todo)
    write_records(train.subset(i for i in train.ids if i not in gone), run.train)
    print(f"unlearned {len(todo)} ids: {len(total.events)} shard replays, {total.gradient_steps} gradient steps")


EVAL_COLUMNS = ("dataset", "mode", "shards", "slices", "seed", "requests_applied",
                "n_test", "correct", "accuracy")


def cmd_eval(cfg: RunConfig, run: RunDir, args) -> None:
    run.require_data()
    run.require_models()
    test = _features(cfg, run.load_split("test"))
    ens = load_ensemble(cfg, run, test.num_classes)
    report = evaluate(ens, test)
    n_applied = len(run.applied_rows())
    row = (test.name, cfg.head_mode.name, cfg.shards, cfg.slices, cfg.seed, n_applied,
           report.n_test, report.correct, f"{report.accuracy:.6f}")
    path = run.reports / "evals.csv"
    rows = []
    if path.is_file():
        with path.open(encoding="utf-8", newline="") as fh:
            rows = [tuple(r) for r in list(csv.reader(fh))[1:]]
    # One row per deletion count, so re-running an unchanged run rewrites the same file.
    rows = [r for r in rows if int(r[5]) != n_applied] + [tuple(map(str, row))]
    rows.sort(key=lambda r: int(r[5]))
    run.reports.mkdir(parents=True, exist_ok=True)
    write_csv(path, EVAL_COLUMNS, rows)
    print(f"accuracy {report.accuracy:.4f} ({report.correct}/{report.n_test}) after {n_applied} deletions")
    for c, (hit, support) in sorted(report.per_class.items()):
        print(f"  class {c}: {hit}/{support}")


def cmd_simulate(cfg: RunConfig, run: RunDir, args) -> None:
    run.require_data()
    train = _features(cfg, run.load_split("train"))
    test = _features(cfg, run.load_split("test"))
    out = Path(args.out) if args.out else run.reports / f"simulate_f{cfg.data_fraction:g}"
    res = run_experiment(
        cfg.grid(), train, test, cfg.train_config(), cfg.head_mode, out,
        num_shards=cfg.shards, dims=cfg.dims(train.num_classes), data_fraction=cfg.data_fraction,
        timing=cfg.timing, workers=cfg.workers,
    )
    accs = [row[4] for row in res.baseline]
    print(f"wrote {out}: baseline accuracy mean {sum(accs) / len(accs):.4f} "
          f"over {len(accs)} seeds at data fraction {cfg.data_fraction:g}")


def _read_rows(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))[1:]


def cmd_report(cfg: RunConfig, run: RunDir, args) -> None:
    out = Path(args.out) if args.out else run.reports / "summary"
    acc, retrain, memory, baseline = [], [], [], []
    applied = run.applied_rows()
    if run.has_models():
        name = run.read_schema().name
        mode = cfg.head_mode.name
        label = (name, mode, cfg.slices)
        counts = storage_report(CheckpointStore(run.checkpoints))
        memory.extend((m, cfg.slices, b) for m, (n, b) in counts.items() if n)
        events = [e for e in CostLedger.read_csv(run.ledger).events if e.event == "unlearn"] \
            if run.ledger.is_file() else []
        cumulative = 0
        for (k, _, source), ev in zip(applied, events):
            cumulative += ev.gradient_steps
            retrain.append((*label, source, cfg.seed, k, cumulative, ev.gradient_steps, ev.wall_ms))
        evals = run.reports / "evals.csv"
        if evals.is_file():
            for r in _read_rows(evals):
                k = int(r[5])
                sources = {s for idx, _, s in applied if idx <= k}
                dist = sources.pop() if len(sources) == 1 else ("none" if not sources else "mixed")
                acc.append((*label, dist, r[4], k, r[8]))
    sims = sorted(p for p in run.reports.glob("simulate*") if p.is_dir()) if run.reports.is_dir() else []
    for sim in sims:
        for name, rows in (("accuracy", acc), ("retrain", retrain), ("memory", memory), ("baseline", baseline)):
            p = sim / f"{name}.csv"
            if p.is_file():
                rows.extend(tuple(r) for r in _read_rows(p))
    if not (acc or retrain or memory or baseline):
        raise StateError(f"{run.root}: nothing to report; train, eval or simulate first")
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "accuracy.csv", ACCURACY_COLUMNS, acc)
    write_csv(out / "retrain.csv", RETRAIN_COLUMNS, retrain)
    write_csv(out / "memory.csv", MEMORY_COLUMNS, memory)
    write_csv(out / "baseline.csv", BASELINE_COLUMNS, baseline)
    print(f"wrote {out}: {len(acc)} accuracy, {len(retrain)} retrain, "
          f"{len(memory)} memory, {len(baseline)} baseline rows")


COMMANDS = {
    "ingest": (cmd_ingest, "load or generate a dataset and split it"),
    "train": (cmd_train, "partition and train every shard, checkpointing each slice"),
    "request": (cmd_request, "draw a deletion-request stream from the current plan"),
    "unlearn": (cmd_unlearn, "forget requested ids one at a time"),
    "eval": (cmd_eval, "score the ensemble on the test split"),
    "simulate": (cmd_simulate, "run the train/unlearn/evaluate grid"),
    "report": (cmd_report, "collect ledgers and reports into one CSV set"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        text = f"{f.metadata['help']} (default: {f.default})"
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS, help=text)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            g.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS,
                           metavar=f.name.upper(), help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sisa", description="Sharded, sliced training with exact unlearning.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--run-dir", required=True, help="run directory (default: none, required)")
        p.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV}/default.conf if set)")
        if name in ("request", "simulate", "report"):
            p.add_argument("--out", help="output path (default: inside the run directory)")
        if name == "unlearn":
            p.add_argument("--request-file", help="request stream written by `request` (default: none)")
            p.add_argument("--ids", help="comma-separated ids to forget (default: none)")
        _add_config_flags(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run = RunDir(args.run_dir)
    func = COMMANDS[args.command][0]
    try:
        if args.command != "ingest" and not run.root.is_dir():
            raise StateError(f"run directory not found: {run.root}")
        run.root.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(run.root / ".lock"), timeout=0)
        try:
            with lock:
                cfg = resolve_config(args, run)
                print("# effective config")
                print(format_config(cfg), end="", flush=True)
                func(cfg, run, args)
        except filelock.Timeout:
            raise StateError(f"{run.root} is locked by another command") from None
    except UsageError as exc:
        print(f"sisa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdapterBudgetError as exc:
        print(f"sisa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateError, StoreError) as exc:
        print(f"sisa: state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (DataError, NotFound, ValueError) as exc:
        # Anything else the pipeline rejects comes from the data it was given.
        print(f"sisa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
