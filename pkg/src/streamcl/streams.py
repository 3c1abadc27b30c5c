"""Synthetic nonstationary task streams, augmentation, and evaluation metrics.

Streams are split-protocol: disjoint class sets per task, one training pass
per task. Two generators are built in (class-conditional Gaussian blobs and
per-task-rotated gratings, the latter engineered for cross-task
interference); a third loads user-supplied arrays from a directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .tensor import InvalidConfig

STREAM_KINDS = ("gaussian_blobs", "rotated_patterns", "tiny_images")
AUGMENT_OPS = ("crop_pad", "hflip", "resize")
AUGMENT_APPLY = ("replay_only", "all", "none")

CROP_PAD = 2

# Generator constants, calibrated so desk-scale tasks are learnable in one
# pass yet interfere enough across tasks for forgetting to be measurable.
BLOB_NOISE = 0.25
GRATING_NOISE = 0.6
GRATING_JITTER_DEG = 4.0


class IncompleteMatrix(ValueError):
    """Metrics need every lower-triangular accuracy entry."""


@dataclass
class SampleSet:
    xs: np.ndarray
    ys: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.ys)


@dataclass
class Task:
    task_id: int
    class_ids: tuple
    train: SampleSet
    test: SampleSet


@dataclass
class TaskStream:
    kind: str
    tasks: list
    dims: int
    channels: int

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def n_classes(self):
        return sum(len(t.class_ids) for t in self.tasks)

    @property
    def total_samples(self):
        return sum(len(t.train) + len(t.test) for t in self.tasks)

    def train_batches(self, task_id, batch_size):
        """Single-pass minibatches in stream order."""
        train = self.tasks[task_id].train
        for start in range(0, len(train), batch_size):
            sl = slice(start, start + batch_size)
            yield SampleSet(train.xs[sl], train.ys[sl], train.indices[sl])


def _grid(dims):
    c = np.arange(dims) - (dims - 1) / 2.0
    return np.meshgrid(c, c, indexing="ij")


def _blob_image(rng, dims, channels, center, sigma, weights, noise):
    u, v = _grid(dims)
    bump = np.exp(-(((u - center[0]) ** 2) + ((v - center[1]) ** 2)) / (2 * sigma ** 2))
    img = weights[:, None, None] * bump[None]
    return img + noise * rng.normal(size=(channels, dims, dims))


def _grating_image(rng, dims, channels, freq, theta, noise):
    u, v = _grid(dims)
    phase = rng.uniform(0, 2 * np.pi)
    jitter = rng.normal(scale=np.deg2rad(GRATING_JITTER_DEG))
    a = theta + jitter
    wave = np.sin(2 * np.pi * freq * (u * np.cos(a) + v * np.sin(a)) / dims + phase)
    img = np.repeat(wave[None], channels, axis=0)
    return img + noise * rng.normal(size=(channels, dims, dims))


def generate_stream(kind, n_tasks, classes_per_task, samples_per_task,
                    test_samples, dims, channels, seed, data_dir=None):
    """Deterministic stream for a seed; class sets are pairwise disjoint."""
    if kind not in STREAM_KINDS:
        raise InvalidConfig(f"unknown stream kind {kind!r}")
    if dims % 16:
        raise InvalidConfig("image dims must be divisible by 16")
    if classes_per_task < 2:
        raise InvalidConfig("need at least 2 classes per task")
    if kind == "tiny_images":
        return _load_tiny_images(n_tasks, classes_per_task, samples_per_task,
                                 test_samples, dims, channels, seed, data_dir)
    rng = np.random.default_rng(seed)
    total_classes = n_tasks * classes_per_task
    if kind == "gaussian_blobs":
        centers = rng.uniform(-dims / 4, dims / 4, size=(total_classes, 2))
        sigmas = rng.uniform(dims / 8, dims / 5, size=total_classes)
        weights = rng.uniform(0.5, 1.5, size=(total_classes, channels))

        def render(r, c):
            return _blob_image(r, dims, channels, centers[c], sigmas[c], weights[c], BLOB_NOISE)
    else:
        freqs = 2.0 + 2.0 * np.arange(classes_per_task)

        def render(r, c):
            task, slot = divmod(c, classes_per_task)
            theta = task * np.pi / n_tasks
            return _grating_image(r, dims, channels, freqs[slot], theta, GRATING_NOISE)

    tasks = []
    next_index = 0
    for t in range(n_tasks):
        class_ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        sets = []
        for count in (samples_per_task, test_samples):
            ys = rng.integers(0, classes_per_task, size=count) + t * classes_per_task
            xs = np.stack([render(rng, y) for y in ys])
            idx = np.arange(next_index, next_index + count)
            next_index += count
            sets.append(SampleSet(xs, ys, idx))
        tasks.append(Task(t, class_ids, sets[0], sets[1]))
    return TaskStream(kind, tasks, dims, channels)


def _load_tiny_images(n_tasks, classes_per_task, samples_per_task, test_samples,
                      dims, channels, seed, data_dir):
    if not data_dir:
        raise InvalidConfig("tiny_images needs stream.data_dir")
    img_path = os.path.join(data_dir, "images.npy")
    lbl_path = os.path.join(data_dir, "labels.txt")
    if not (os.path.exists(img_path) and os.path.exists(lbl_path)):
        raise InvalidConfig(f"{data_dir} must hold images.npy and labels.txt")
    images = np.load(img_path).astype(np.float64)
    labels = np.array([int(l) for l in open(lbl_path).read().split()], dtype=np.int64)
    if images.ndim != 4 or images.shape[0] != labels.size:
        raise InvalidConfig("images.npy must be (N,C,W,H) matching labels.txt")
    if images.shape[1] != channels or images.shape[2] != dims or images.shape[3] != dims:
        raise InvalidConfig(
            f"images are {images.shape[1:]}, config wants ({channels},{dims},{dims})")
    classes = np.unique(labels)
    if classes.size < n_tasks * classes_per_task:
        raise InvalidConfig("not enough classes in the directory for the split")
    rng = np.random.default_rng(seed)
    tasks = []
    next_index = 0
    for t in range(n_tasks):
        class_ids = tuple(int(c) for c in
                          classes[t * classes_per_task:(t + 1) * classes_per_task])
        pool = np.flatnonzero(np.isin(labels, class_ids))
        pool = rng.permutation(pool)
        need = samples_per_task + test_samples
        if pool.size < need:
            raise InvalidConfig(f"task {t} has {pool.size} samples, needs {need}")
        sets = []
        offset = 0
        for count in (samples_per_task, test_samples):
            sel = pool[offset:offset + count]
            offset += count
            idx = np.arange(next_index, next_index + count)
            next_index += count
            sets.append(SampleSet(images[sel].copy(), labels[sel].copy(), idx))
        tasks.append(Task(t, class_ids, sets[0], sets[1]))
    return TaskStream("tiny_images", tasks, dims, channels)


# augmentation ---------------------------------------------------------------

_RESIZE_CACHE = {}


def _resize_matrix(src, dst):
    key = (src, dst)
    if key not in _RESIZE_CACHE:
        m = np.zeros((dst, src))
        for i in range(dst):
            s = min(max((i + 0.5) * src / dst - 0.5, 0.0), src - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, src - 1)
            f = s - i0
            m[i, i0] += 1.0 - f
            m[i, i1] += f
        _RESIZE_CACHE[key] = m
    return _RESIZE_CACHE[key]


def resize_images(xs, dims):
    if xs.shape[2] == dims and xs.shape[3] == dims:
        return xs
    mw = _resize_matrix(xs.shape[2], dims)
    mh = _resize_matrix(xs.shape[3], dims)
    return np.einsum("pw,bcwh,qh->bcpq", mw, xs, mh, optimize=True)


def _crop_pad(xs, rng):
    b, c, w, h = xs.shape
    padded = np.pad(xs, ((0, 0), (0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)))
    out = np.empty_like(xs)
    offs = rng.integers(0, 2 * CROP_PAD + 1, size=(b, 2))
    for i in range(b):
        ow, oh = offs[i]
        out[i] = padded[i, :, ow:ow + w, oh:oh + h]
    return out


def _hflip(xs, rng):
    out = xs.copy()
    flip = rng.random(len(xs)) < 0.5
    out[flip] = out[flip][:, :, ::-1, :]
    return out


def augment_batch(xs, ops, apply, rng, is_replay, target_dims=None):
    """Label-preserving augmentation; geometric ops hit replay data only in
    ``replay_only`` mode, while resize (when requested) applies everywhere."""
    for op in ops:
        if op not in AUGMENT_OPS:
            raise InvalidConfig(f"unknown augmentation {op!r}")
    if apply not in AUGMENT_APPLY:
        raise InvalidConfig(f"unknown augmentation policy {apply!r}")
    out = np.asarray(xs, dtype=np.float64)
    if "resize" in ops and target_dims and apply != "none":
        out = resize_images(out, target_dims)
    if apply == "none" or (apply == "replay_only" and not is_replay):
        return out
    if "crop_pad" in ops:
        out = _crop_pad(out, rng)
    if "hflip" in ops:
        out = _hflip(out, rng)
    return out


# metrics ---------------------------------------------------------------------

class AccuracyMatrix:
    """Lower-triangular task-by-task accuracy; row i lands after task i."""

    def __init__(self, n_tasks):
        self.n_tasks = n_tasks
        self.a = np.full((n_tasks, n_tasks), np.nan)

    def set_entry(self, trained_upto, task, value):
        if task > trained_upto:
            raise IncompleteMatrix("upper-triangular entries are undefined")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0,1]")
        self.a[trained_upto, task] = value

    def row(self, i):
        return self.a[i, :i + 1]

    @property
    def complete(self):
        return all(np.isfinite(self.a[i, j])
                   for i in range(self.n_tasks) for j in range(i + 1))

    def csv_lines(self):
        return [",".join(f"{v:.6f}" for v in self.row(i)) for i in range(self.n_tasks)]


def compute_metrics(matrix):
    """Final-row accuracy (ACC), forgetting (FM), learning accuracy (LA).

    FM averages, over all but the last task, the gap between the best
    accuracy any earlier-trained model reached on that task and the final
    model's accuracy; it goes negative under backward transfer.
    """
    a = matrix.a if isinstance(matrix, AccuracyMatrix) else np.asarray(matrix)
    t = a.shape[0]
    for i in range(t):
        if not np.all(np.isfinite(a[i, :i + 1])):
            raise IncompleteMatrix(f"row {i} incomplete")
    acc = float(np.mean(a[t - 1, :]))
    la = float(np.mean(np.diag(a)))
    if t == 1:
        return acc, 0.0, la
    gaps = []
    for j in range(t - 1):
        best_earlier = np.nanmax(a[j:t - 1, j])
        gaps.append(best_earlier - a[t - 1, j])
    return acc, float(np.mean(gaps)), la
