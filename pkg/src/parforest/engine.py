"""Execution engines: serial, shared-memory chunked-parallel (mc), SPMD
message-passing (spmd), and the combined hybrid mode, plus the benchmark
sweep harness.

All engines produce bit-identical prediction vectors for the same (seed,
trees, data, params): trees are keyed by global tree index, the split by a
fixed stream, and prediction is a per-row vote, so how the work is chunked
over workers or ranks cannot change the result. Training splits the model
(tree blocks); prediction splits the data (row blocks).

Shared-memory parallelism runs a fixed pool of worker threads against the
read-only training matrix (the compiled kernels release the GIL), giving the
memory behavior of forked copy-on-write workers with a portable mechanism.
"""

from __future__ import annotations

import csv
import hashlib
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .comm import Communicator, ProtocolError, launch
from .data import Dataset, load_dataset, synth_dataset, train_test_split
from .forest import (Forest, ForestParams, accuracy, build_forest_block,
                     combine, deserialize_forest_block, predict_forest_slice,
                     serialize_forest_block)
from .partition import block_indices, chunk_sizes
from .rng import StreamKey, make_stream

MODES = ("serial", "mc", "spmd", "hybrid")

CSV_HEADER = ["mode", "workers", "ranks", "trees", "seed",
              "train_time_s", "predict_time_s", "total_time_s", "accuracy"]


@dataclass
class RunConfig:
    """One engine invocation: mode, parallel widths, model size, seed, and
    the data source (a CSV path or a synthetic n,p,c spec)."""

    mode: str = "serial"
    workers: int = 1
    ranks: int = 1
    n_trees: int = 500
    seed: int = 1
    data_path: str | None = None
    synth: tuple[int, int, int] | None = None
    test_frac: float = 0.2
    params: ForestParams | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.ranks < 1:
            raise ValueError(f"ranks must be >= 1, got {self.ranks}")
        if self.n_trees < 1:
            raise ValueError(f"trees must be >= 1, got {self.n_trees}")
        if not 0.0 < self.test_frac < 1.0:
            raise ValueError(f"test_frac must be in (0, 1), got {self.test_frac}")
        if (self.data_path is None) == (self.synth is None):
            raise ValueError("exactly one of data_path or synth must be given")

    def forest_params(self) -> ForestParams:
        base = self.params if self.params is not None else ForestParams()
        if base.n_trees != self.n_trees:
            base = ForestParams(n_trees=self.n_trees, mtry=base.mtry,
                                min_node_size=base.min_node_size,
                                max_depth=base.max_depth,
                                bootstrap_size=base.bootstrap_size)
        return base

    def digest(self) -> str:
        """Canonical config fingerprint; ranks compare it at startup so a
        diverging SPMD configuration fails immediately instead of silently."""
        p = self.forest_params()
        canon = (self.mode, self.workers, self.n_trees, self.seed,
                 self.data_path, self.synth, self.test_frac,
                 (p.n_trees, p.mtry, p.min_node_size, p.max_depth, p.bootstrap_size))
        return hashlib.sha256(repr(canon).encode()).hexdigest()


@dataclass
class BenchRecord:
    """One benchmark observation. Times cover training (tree building plus
    forest assembly) and prediction; data loading is excluded so engines
    compare on the parallelized work."""

    mode: str
    workers: int
    ranks: int
    n_trees: int
    seed: int
    train_time_s: float
    predict_time_s: float
    total_time_s: float
    accuracy: float | None

    def csv_row(self) -> list[str]:
        acc = "" if self.accuracy is None else repr(self.accuracy)
        return [self.mode, str(self.workers), str(self.ranks), str(self.n_trees),
                str(self.seed), repr(self.train_time_s), repr(self.predict_time_s),
                repr(self.total_time_s), acc]


@dataclass
class RunResult:
    """Engine outcome: the benchmark record plus the full prediction vector
    (ordered by test-row position; None only on failure paths)."""

    record: BenchRecord
    predictions: np.ndarray | None


def write_records_csv(path, records: list[BenchRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow(rec.csv_row())


def read_records_csv(path) -> list[BenchRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        records = []
        for row in reader:
            records.append(BenchRecord(
                mode=row[0], workers=int(row[1]), ranks=int(row[2]),
                n_trees=int(row[3]), seed=int(row[4]),
                train_time_s=float(row[5]), predict_time_s=float(row[6]),
                total_time_s=float(row[7]),
                accuracy=float(row[8]) if row[8] else None))
        return records


def write_predictions(path, predictions: np.ndarray) -> None:
    """One predicted class index per line (the byte-comparable format used
    to check cross-engine exactness)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(str(int(v)) for v in predictions))
        fh.write("\n")


def read_predictions(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return np.array([int(line) for line in fh.read().split()], dtype=np.int32)


_warmed = False


def _warmup() -> None:
    """Compile (or load from cache) the kernels before any timed region."""
    global _warmed
    if not _warmed:
        _kernels.warmup()
        _warmed = True


def load_config_data(cfg: RunConfig) -> Dataset:
    if cfg.data_path is not None:
        return load_dataset(cfg.data_path)
    n, p, c = cfg.synth
    return synth_dataset(n, p, c, make_stream(cfg.seed, StreamKey("synth", 0)))


def _prepare(cfg: RunConfig):
    """Load data and apply the seeded split; identical on every rank."""
    ds = load_config_data(cfg)
    split = train_test_split(ds, cfg.test_frac, make_stream(cfg.seed, StreamKey("split", 0)))
    train = ds.subset(split.train_indices)
    test = ds.subset(split.test_indices)
    return train, test


def _record(cfg: RunConfig, mode: str, workers: int, ranks: int,
            t0: float, t1: float, t2: float, acc: float | None) -> BenchRecord:
    return BenchRecord(mode=mode, workers=workers, ranks=ranks,
                       n_trees=cfg.n_trees, seed=cfg.seed,
                       train_time_s=t1 - t0, predict_time_s=t2 - t1,
                       total_time_s=t2 - t0, accuracy=acc)


def run_serial(cfg: RunConfig) -> RunResult:
    """Build all trees in order, predict every test row, report accuracy."""
    _warmup()
    train, test = _prepare(cfg)
    params = cfg.forest_params().resolved(train)
    t0 = time.perf_counter()
    forest = build_forest_block(train, params, range(cfg.n_trees), cfg.seed)
    forest.compiled()
    t1 = time.perf_counter()
    preds = np.empty(test.n, np.int32)
    predict_forest_slice(forest, test.features, 0, test.n, preds)
    t2 = time.perf_counter()
    acc = accuracy(preds, test.labels)
    return RunResult(_record(cfg, "serial", 1, 1, t0, t1, t2, acc), preds)


def _build_blocks_pooled(pool: ThreadPoolExecutor, train: Dataset,
                         params: ForestParams, seed: int, first_index: int,
                         n_trees: int, workers: int) -> list[Forest]:
    """Build [first_index, first_index + n_trees) as one near-equal tree
    block per worker; empty chunks are skipped."""
    plan = chunk_sizes(n_trees, workers)
    futures = []
    for w in range(workers):
        if plan.sizes[w] == 0:
            continue
        lo = first_index + plan.offsets[w]
        futures.append(pool.submit(build_forest_block, train, params,
                                   range(lo, lo + plan.sizes[w]), seed))
    return [f.result() for f in futures]


def _predict_pooled(pool: ThreadPoolExecutor, forest: Forest, rows: np.ndarray,
                    start: int, end: int, out: np.ndarray, workers: int) -> None:
    """Predict rows[start:end) into out as one contiguous row block per
    worker, concatenated in block order by construction."""
    forest.compiled()  # build shared arrays before the workers race to them
    plan = chunk_sizes(end - start, workers)
    futures = []
    for w in range(workers):
        if plan.sizes[w] == 0:
            continue
        lo = start + plan.offsets[w]
        futures.append(pool.submit(predict_forest_slice, forest, rows,
                                   lo, lo + plan.sizes[w], out))
    for f in futures:
        f.result()


def run_multicore(cfg: RunConfig) -> RunResult:
    """Shared-memory engine: a fixed pool of worker threads builds one tree
    block each against the shared training set, then predicts one test-row
    block each. Predictions are identical to the serial engine's."""
    _warmup()
    train, test = _prepare(cfg)
    params = cfg.forest_params().resolved(train)
    workers = cfg.workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        t0 = time.perf_counter()
        blocks = _build_blocks_pooled(pool, train, params, cfg.seed, 0,
                                      cfg.n_trees, workers)
        forest = combine(blocks)
        forest.compiled()
        t1 = time.perf_counter()
        preds = np.empty(test.n, np.int32)
        _predict_pooled(pool, forest, test.features, 0, test.n, preds, workers)
        t2 = time.perf_counter()
    acc = accuracy(preds, test.labels)
    return RunResult(_record(cfg, "mc", workers, 1, t0, t1, t2, acc), preds)


def _check_config_digest(comm: Communicator, cfg: RunConfig) -> None:
    digests = comm.allgather(cfg.digest().encode("ascii"))
    mine = cfg.digest().encode("ascii")
    for r, d in enumerate(digests):
        if d != mine:
            raise ProtocolError(
                f"run config differs across ranks (rank {comm.rank} vs rank {r}); "
                f"all ranks must execute the same configuration")


def _spmd_run(comm: Communicator, cfg: RunConfig, mode: str, workers: int) -> RunResult:
    """Common SPMD body: every rank builds its tree block, the blocks are
    allgathered and combined everywhere, each rank predicts its test-row
    block, and correct counts reduce to rank 0. With workers > 1 each rank
    additionally splits its own block over a thread pool (hybrid mode)."""
    _warmup()
    _check_config_digest(comm, cfg)
    train, test = _prepare(cfg)
    params = cfg.forest_params().resolved(train)
    size, rank = comm.size, comm.rank

    with ThreadPoolExecutor(max_workers=workers) as pool:
        comm.barrier()
        t0 = time.perf_counter()
        my_trees = block_indices(cfg.n_trees, size, rank)
        local_blocks = _build_blocks_pooled(pool, train, params, cfg.seed,
                                            my_trees.start, len(my_trees), workers)
        local = combine(local_blocks) if local_blocks else build_forest_block(
            train, params, [], cfg.seed)
        gathered = comm.allgather(serialize_forest_block(local))
        blocks = [local if r == rank
                  else deserialize_forest_block(gathered[r], params, train.n_classes, train.p)
                  for r in range(size)]
        forest = combine(blocks)
        forest.compiled()
        comm.barrier()
        t1 = time.perf_counter()

        my_rows = block_indices(test.n, size, rank)
        preds = np.zeros(test.n, np.int32)
        if len(my_rows) > 0:
            _predict_pooled(pool, forest, test.features, my_rows.start,
                            my_rows.stop, preds, workers)
        local_pred = preds[my_rows.start:my_rows.stop]
        local_correct = int(np.count_nonzero(
            local_pred == test.labels[my_rows.start:my_rows.stop]))
        total_correct = comm.reduce_sum(local_correct, root=0)
        parts = comm.allgather(local_pred.astype("<i4").tobytes())
        comm.barrier()
        t2 = time.perf_counter()

    full_pred = np.concatenate([np.frombuffer(p, dtype="<i4") for p in parts]) \
        .astype(np.int32)
    acc = None
    if rank == 0:
        acc = float(total_correct) / test.n
        comm.root_print(f"{mode} ranks={size} trees={cfg.n_trees} "
                        f"correct={total_correct}/{test.n} accuracy={acc:.6f}")
    return RunResult(_record(cfg, mode, workers, size, t0, t1, t2, acc), full_pred)


def run_spmd(comm: Communicator, cfg: RunConfig) -> RunResult:
    """Message-passing engine. The record is root-valid: accuracy is
    computed on rank 0 (non-root records carry None)."""
    return _spmd_run(comm, cfg, "spmd", 1)


def run_hybrid(comm: Communicator, cfg: RunConfig) -> RunResult:
    """Message passing across ranks with cfg.workers threads inside each
    rank (nested chunking); total concurrency = ranks x workers."""
    return _spmd_run(comm, cfg, "hybrid", cfg.workers)


def _data_args(cfg: RunConfig) -> list[str]:
    if cfg.data_path is not None:
        return ["--data", str(cfg.data_path)]
    n, p, c = cfg.synth
    return ["--synth", f"{n},{p},{c}"]


def _run_cell(cfg: RunConfig, mode: str, count: int, tmp_dir) -> BenchRecord:
    """Run one benchmark cell. Distributed modes go through the launcher so
    their timings include real process-group overhead."""
    if mode == "serial":
        return run_serial(cfg).record
    if mode == "mc":
        sub = RunConfig(mode="mc", workers=count, n_trees=cfg.n_trees,
                        seed=cfg.seed, data_path=cfg.data_path, synth=cfg.synth,
                        test_frac=cfg.test_frac, params=cfg.params)
        return run_multicore(sub).record
    if mode in ("spmd", "hybrid"):
        out = tmp_dir / f"cell_{mode}_{count}.csv"
        argv = [sys.executable, "-m", "parforest.cli", "run",
                "--mode", mode, "--trees", str(cfg.n_trees),
                "--seed", str(cfg.seed), "--test-frac", str(cfg.test_frac),
                "--out", str(out)] + _data_args(cfg)
        if mode == "hybrid":
            argv += ["--workers", str(cfg.workers)]
        codes = launch(count, argv)
        bad = [r for r, c in enumerate(codes) if c != 0]
        if bad:
            raise RuntimeError(f"{mode} cell with {count} ranks failed on ranks {bad}")
        records = read_records_csv(out)
        if len(records) != 1:
            raise RuntimeError(f"expected one record from {mode} cell, got {len(records)}")
        return records[0]
    raise ValueError(f"unknown benchmark mode {mode!r}")


def bench_sweep(cfg: RunConfig, modes: list[str], counts: list[int], reps: int,
                out_path, tmp_dir=None) -> list[BenchRecord]:
    """Run every (mode, worker-count) cell `reps` times; CSV rows are written
    and flushed as they are produced, sorted by (mode, count, repetition).
    Prints the per-cell median total time. serial runs only at count 1."""
    import tempfile
    from pathlib import Path

    if not counts:
        raise ValueError("counts must be non-empty")
    if reps < 1:
        raise ValueError(f"repetitions must be >= 1, got {reps}")
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    _warmup()
    records: list[BenchRecord] = []
    with tempfile.TemporaryDirectory() as td:
        tdir = Path(tmp_dir) if tmp_dir is not None else Path(td)
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            fh.flush()
            for mode in sorted(set(modes)):
                for count in sorted(set(counts)):
                    if mode == "serial" and count != 1:
                        continue
                    cell: list[BenchRecord] = []
                    for _rep in range(reps):
                        rec = _run_cell(cfg, mode, count, tdir)
                        cell.append(rec)
                        records.append(rec)
                        writer.writerow(rec.csv_row())
                        fh.flush()
                    med = statistics.median(r.total_time_s for r in cell)
                    acc = cell[0].accuracy
                    print(f"bench mode={mode} count={count} reps={reps} "
                          f"median_total_s={med:.3f} accuracy={acc:.6f}",
                          flush=True)
    return records
