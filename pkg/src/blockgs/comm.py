"""Communicators with exact synchronization accounting.

Two backends share one interface: ``SerialComm`` (a single process) and
``SimComm`` (P in-process workers driven by :func:`run_spmd`).  Every
collective is one synchronization event, whatever happens inside it.
"""
from __future__ import annotations

import copy
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

DEFAULT_DEADLOCK_BUDGET_MS = 5000


class CollectiveError(RuntimeError):
    """Ranks disagreed about a collective (kind, label or shape)."""


class DeadlockError(CollectiveError):
    pass


class _Aborted(Exception):
    """Raised in ranks woken up because another rank failed."""


def deadlock_budget() -> float:
    """Idle budget in seconds, from BLOCKGS_DEADLOCK_BUDGET_MS."""
    raw = os.environ.get("BLOCKGS_DEADLOCK_BUDGET_MS", "")
    try:
        ms = float(raw) if raw.strip() else DEFAULT_DEADLOCK_BUDGET_MS
    except ValueError:
        ms = DEFAULT_DEADLOCK_BUDGET_MS
    return max(ms, 1.0) / 1000.0


@dataclass
class SyncStats:
    sync_count: int = 0
    words_reduced: int = 0
    by_label: Counter = field(default_factory=Counter)
    tree_rounds: int = 0

    def record(self, label: str, words: int, rounds: int = 0) -> None:
        self.sync_count += 1
        self.words_reduced += int(words)
        self.by_label[label] += 1
        self.tree_rounds += rounds

    def copy(self) -> "SyncStats":
        return SyncStats(self.sync_count, self.words_reduced, Counter(self.by_label), self.tree_rounds)

    def reset(self) -> None:
        self.sync_count = 0
        self.words_reduced = 0
        self.by_label.clear()
        self.tree_rounds = 0

    def count(self, prefix: str = "") -> int:
        """Sync events whose label starts with ``prefix``."""
        return sum(v for k, v in self.by_label.items() if k.startswith(prefix))

    def since(self, before: "SyncStats") -> "SyncStats":
        return SyncStats(
            self.sync_count - before.sync_count,
            self.words_reduced - before.words_reduced,
            Counter({k: v for k, v in (self.by_label - before.by_label).items() if v}),
            self.tree_rounds - before.tree_rounds,
        )


def _tree_reduce(values: list, combine: Callable[[Any, Any], Any]) -> tuple[Any, int]:
    """Pairwise binary tree over ranks: round t merges rank r with r + 2**t."""
    vals = list(values)
    step, rounds = 1, 0
    while step < len(vals):
        for r in range(0, len(vals), 2 * step):
            if r + step < len(vals):
                vals[r] = combine(vals[r], vals[r + step])
        step *= 2
        rounds += 1
    return vals[0], rounds


def _sum_in_rank_order(arrays: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        detail = ", ".join(f"rank {r}: {np.shape(a)}" for r, a in enumerate(arrays))
        raise CollectiveError(f"allreduce shape mismatch ({detail})")
    out = np.array(arrays[0], dtype=np.float64, copy=True)
    for a in arrays[1:]:
        out = out + a
    return out


class Communicator:
    """Per-rank handle; subclasses supply ``_collective``."""

    rank: int
    size: int

    @property
    def stats(self) -> SyncStats:
        raise NotImplementedError

    def _collective(self, kind: str, label: str, payload, reduce_fn, words_fn):
        raise NotImplementedError

    def allreduce_sum(self, local, label: str = "allreduce") -> np.ndarray:
        """Elementwise sum over ranks, added in rank order 0..P-1."""
        local = np.asarray(local, dtype=np.float64)
        return self._collective("allreduce", label, local, _sum_in_rank_order,
                                lambda vals: int(np.size(vals[0])))

    def allreduce(self, local, op: Callable[[Any, Any], Any], label: str, words: int):
        """Reduce arbitrary payloads with ``op`` left to right in rank order."""
        def reduce_fn(vals):
            acc = vals[0]
            for v in vals[1:]:
                acc = op(acc, v)
            return acc
        return self._collective("allreduce", label, local, reduce_fn, lambda vals: words)

    def reduce_factor_tree(self, local, combine: Callable[[Any, Any], Any],
                           label: str = "tree", words: int | None = None):
        """Binary-tree reduction followed by a broadcast; one sync event."""
        if words is None:
            words = int(np.size(local)) if isinstance(local, np.ndarray) else 0
        return self._collective("tree", label, local,
                                lambda vals: _tree_reduce(vals, combine),
                                lambda vals: words)

    def gather(self, local, label: str = "gather") -> list:
        """Every rank's payload, in rank order, delivered to every rank."""
        return self._collective("gather", label, local, list,
                                lambda vals: sum(int(np.size(v)) for v in vals))


class SerialComm(Communicator):
    def __init__(self):
        self.rank = 0
        self.size = 1
        self._stats = SyncStats()

    @property
    def stats(self) -> SyncStats:
        return self._stats

    def _collective(self, kind, label, payload, reduce_fn, words_fn):
        result = reduce_fn([payload])
        rounds = 0
        if kind == "tree":
            result, rounds = result
        self._stats.record(label, words_fn([payload]), rounds)
        return copy.deepcopy(result)


class _World:
    """Rendezvous shared by the P workers of one SPMD run."""

    def __init__(self, size: int, budget: float):
        self.size = size
        self.budget = budget
        self.cond = threading.Condition()
        self.stats = SyncStats()
        self.pending: dict[int, tuple] = {}
        self.generation = 0
        self.result = None
        self.failure: tuple[int, BaseException] | None = None
        self.finished: set[int] = set()

    def fail(self, rank: int, exc: BaseException) -> None:
        with self.cond:
            if self.failure is None:
                self.failure = (rank, exc)
            self.cond.notify_all()

    def finish(self, rank: int) -> None:
        with self.cond:
            self.finished.add(rank)
            self.cond.notify_all()

    def _complete(self) -> None:
        slots = [self.pending[r] for r in range(self.size)]
        kinds = {(kind, label) for kind, label, *_ in slots}
        if len(kinds) != 1:
            detail = ", ".join(f"rank {r}: {k} '{lab}'" for r, (k, lab, *_) in enumerate(slots))
            raise CollectiveError(f"collective mismatch ({detail})")
        kind, label, _, reduce_fn, words_fn = slots[0]
        payloads = [p for _, _, p, _, _ in slots]
        result = reduce_fn(payloads)
        rounds = 0
        if kind == "tree":
            result, rounds = result
        self.stats.record(label, words_fn(payloads), rounds)
        self.result = result
        self.pending.clear()
        self.generation += 1
        self.cond.notify_all()

    def collective(self, rank, kind, label, payload, reduce_fn, words_fn):
        with self.cond:
            if self.failure is not None:
                raise _Aborted()
            gen = self.generation
            self.pending[rank] = (kind, label, payload, reduce_fn, words_fn)
            if len(self.pending) == self.size:
                try:
                    self._complete()
                except Exception as exc:
                    self.failure = (rank, exc)
                    self.cond.notify_all()
                    raise
            else:
                deadline = time.monotonic() + self.budget
                while self.generation == gen:
                    if self.failure is not None:
                        raise _Aborted()
                    missing = sorted(set(range(self.size)) - set(self.pending))
                    gone = [r for r in missing if r in self.finished]
                    if gone:
                        exc = CollectiveError(
                            f"collective '{label}' on rank {rank}: rank(s) {gone} exited "
                            f"without joining")
                        self.failure = (rank, exc)
                        self.cond.notify_all()
                        raise exc
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        exc = DeadlockError(
                            f"collective '{label}' idle for {self.budget:.3f}s: waiting ranks "
                            f"{sorted(self.pending)}, missing ranks {missing}")
                        self.failure = (rank, exc)
                        self.cond.notify_all()
                        raise exc
                    self.cond.wait(remaining)
            return copy.deepcopy(self.result)


class SimComm(Communicator):
    def __init__(self, world: _World, rank: int):
        self._world = world
        self.rank = rank
        self.size = world.size

    @property
    def stats(self) -> SyncStats:
        return self._world.stats

    def _collective(self, kind, label, payload, reduce_fn, words_fn):
        return self._world.collective(self.rank, kind, label, payload, reduce_fn, words_fn)


@dataclass
class SpmdResult:
    results: list
    stats: SyncStats


def run_spmd(nprocs: int, body: Callable[..., Any], *args, backend: str | None = None,
             budget: float | None = None, **kwargs) -> SpmdResult:
    """Run ``body(comm, *args, **kwargs)`` on ``nprocs`` ranks.

    ``backend`` defaults to "serial" for one rank and "simulated" otherwise.
    A failing rank fails the whole run with that rank's own exception.
    """
    if nprocs < 1:
        raise ValueError("nprocs must be >= 1")
    backend = backend or ("serial" if nprocs == 1 else "simulated")
    if backend == "serial":
        if nprocs != 1:
            raise ValueError("serial backend runs exactly one rank")
        comm = SerialComm()
        return SpmdResult([body(comm, *args, **kwargs)], comm.stats.copy())
    if backend != "simulated":
        raise ValueError(f"unknown backend {backend!r}")

    world = _World(nprocs, deadlock_budget() if budget is None else budget)
    results: list = [None] * nprocs
    errors: dict[int, BaseException] = {}

    def worker(rank):
        try:
            results[rank] = body(SimComm(world, rank), *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller below
            errors[rank] = exc
            if not isinstance(exc, _Aborted):
                world.fail(rank, exc)
        finally:
            world.finish(rank)

    threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(nprocs)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if errors:
        if world.failure is not None:
            rank, exc = world.failure
        else:
            rank = min(errors)
            exc = errors[rank]
        exc.spmd_rank = rank
        raise exc
    return SpmdResult(results, world.stats.copy())
