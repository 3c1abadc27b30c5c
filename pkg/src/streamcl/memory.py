"""Replay storage: per-task ring buffers, a reservoir buffer, snapshots.

The ring buffer keeps a FIFO window of fixed capacity per task (task-aware
setting); the reservoir buffer keeps a uniform sample of the whole stream
(task-free setting). Classifier snapshots are deep value copies taken at
task boundaries and serve as frozen distillation teachers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import save_pyramid_file


class EmptyBuffer(RuntimeError):
    """Sampling requested from a buffer with no stored items."""


class InsufficientSamples(ValueError):
    """A stored task cannot supply the requested number of samples."""


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    task_ids: np.ndarray
    indices: np.ndarray
    with_replacement: bool = False

    def __len__(self):
        return len(self.ys)


class RingBuffer:
    """Per-task slot arrays with FIFO overwrite at fixed capacity."""

    policy = "ring"

    def __init__(self, capacity_per_task):
        if capacity_per_task < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity_per_task
        self._slots = {}
        self._cursor = {}

    def insert(self, x, y, task_id, index, rng=None):
        slots = self._slots.setdefault(task_id, [])
        item = (np.asarray(x), int(y), int(task_id), int(index))
        if len(slots) < self.capacity:
            slots.append(item)
        else:
            cur = self._cursor.get(task_id, 0)
            slots[cur] = item
            self._cursor[task_id] = (cur + 1) % self.capacity

    def __len__(self):
        return sum(len(s) for s in self._slots.values())

    def stored_tasks(self):
        return sorted(self._slots)

    def items(self):
        out = []
        for t in self.stored_tasks():
            out.extend(self._slots[t])
        return out

    def task_items(self, task_id):
        return list(self._slots.get(task_id, []))

    def unique_labels(self):
        return sorted({y for _, y, _, _ in self.items()})


class ReservoirBuffer:
    """Capacity-bounded uniform sample of an unbounded stream.

    After n insertions each seen item resides in the buffer with
    probability capacity/n: item i (1-based) draws j uniform in [0, i) and
    replaces slot j when j < capacity.
    """

    policy = "reservoir"

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._slots = []
        self.seen = 0

    def insert(self, x, y, task_id, index, rng=None):
        if rng is None:
            raise ValueError("reservoir insertion needs an rng")
        self.seen += 1
        item = (np.asarray(x), int(y), int(task_id), int(index))
        if len(self._slots) < self.capacity:
            self._slots.append(item)
            return
        j = int(rng.integers(0, self.seen))
        if j < self.capacity:
            self._slots[j] = item

    def __len__(self):
        return len(self._slots)

    def items(self):
        return list(self._slots)

    def stored_tasks(self):
        return sorted({t for _, _, t, _ in self._slots})

    def task_items(self, task_id):
        return [it for it in self._slots if it[2] == task_id]

    def label_items(self, label):
        return [it for it in self._slots if it[1] == label]

    def unique_labels(self):
        return sorted({y for _, y, _, _ in self._slots})


def buffer_insert(buffer, sample, rng=None):
    x, y, task_id, index = sample
    buffer.insert(x, y, task_id, index, rng=rng)


def _to_batch(items, with_replacement=False):
    xs = np.stack([it[0] for it in items])
    ys = np.array([it[1] for it in items], dtype=np.int64)
    ts = np.array([it[2] for it in items], dtype=np.int64)
    idx = np.array([it[3] for it in items], dtype=np.int64)
    return Batch(xs, ys, ts, idx, with_replacement)


def buffer_sample(buffer, batch_size, rng):
    """Uniform draw without replacement; falls back to replacement (and
    flags it) when the request exceeds the stored count."""
    items = buffer.items()
    if not items:
        raise EmptyBuffer("no stored samples to draw from")
    replace = batch_size > len(items)
    chosen = rng.choice(len(items), size=batch_size, replace=replace)
    return _to_batch([items[i] for i in chosen], with_replacement=replace)


def select_cross_task_tuples(buffer, n_per_task, rng):
    """Pick n samples per stored task; the caller caches the result so the
    selection stays fixed until the next task boundary."""
    selection = {}
    for t in buffer.stored_tasks():
        items = buffer.task_items(t)
        if len(items) < n_per_task:
            raise InsufficientSamples(
                f"task {t} stores {len(items)} samples, need {n_per_task}")
        chosen = rng.choice(len(items), size=n_per_task, replace=False)
        selection[t] = _to_batch([items[i] for i in chosen])
    return selection


def select_pseudo_task_tuples(buffer, class_order, new_task_threshold,
                              n_per_task, n_per_class, rng):
    """Task-free selection over pseudo-tasks of ``new_task_threshold`` classes.

    Pseudo-task p (1-based) covers classes class_order[(p-1)S : pS].
    Anchors take up to ``n_per_class`` stored samples per class; tuples take
    up to ``n_per_task`` samples across the pseudo-task. Classes evicted
    from the reservoir simply contribute fewer samples.
    """
    s = new_task_threshold
    n_complete = len(class_order) // s
    anchors, tuples = {}, {}
    for p in range(1, n_complete + 1):
        classes = class_order[(p - 1) * s: p * s]
        a_items = []
        pool = []
        for c in classes:
            stored = buffer.label_items(c)
            pool.extend(stored)
            if stored:
                take = min(n_per_class, len(stored))
                chosen = rng.choice(len(stored), size=take, replace=False)
                a_items.extend(stored[i] for i in chosen)
        if pool:
            take = min(n_per_task, len(pool))
            chosen = rng.choice(len(pool), size=take, replace=False)
            tuples[p] = _to_batch([pool[i] for i in chosen])
        if a_items:
            anchors[p] = _to_batch(a_items)
    return anchors, tuples


class ClassifierSnapshot:
    """Frozen value copy of a classifier's state at a task boundary."""

    def __init__(self, task_id, state):
        self.task_id = task_id
        self.state = {k: np.array(v, copy=True) for k, v in state.items()}

    def state_bytes(self):
        return b"".join(self.state[k].tobytes() for k in sorted(self.state))


def store_snapshot(classifier, task_id):
    return ClassifierSnapshot(task_id, classifier.state())


@dataclass
class DistillCache:
    """Snapshot plus the tuple set built from it; they expire together."""

    snapshot: ClassifierSnapshot
    tuple_set: object


def dump_buffer(buffer, path):
    """Write stored inputs as a one-level pyramid container plus a sidecar
    text file (one ``label task_id`` pair per line)."""
    items = buffer.items()
    if not items:
        raise EmptyBuffer("nothing to dump")
    xs = np.stack([it[0] for it in items])
    save_pyramid_file(path, [xs])
    sidecar = f"{path}.labels"
    with open(sidecar, "w", encoding="ascii") as fh:
        for _, y, t, _ in items:
            fh.write(f"{y} {t}\n")
    return sidecar
