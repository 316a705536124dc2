"""Volumes, manifests, fold assignment, balanced batching and synthetic data."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, TruncationError

LABELS = ("AD", "LMCI", "EMCI", "NC")
# Ordering of the diagnostic spectrum used to scale the synthetic signature.
SEVERITY = {"NC": 0.0, "EMCI": 1 / 3, "LMCI": 2 / 3, "AD": 1.0}
TASKS = (("AD", "NC"), ("AD", "EMCI"), ("AD", "LMCI"), ("LMCI", "NC"), ("LMCI", "EMCI"), ("EMCI", "NC"))
FULL_CUBE = 110

VOLUME_MAGIC = b"VOXVOL\x00\x00"
VOLUME_VERSION = 1
_VOL_PREAMBLE = struct.Struct("<8sHH")
MANIFEST_NAME = "manifest.tsv"


@dataclass
class LabeledSample:
    subject_id: str
    acquisition_index: int
    label: str
    volume: np.ndarray = None
    path: str = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r} (expected one of {LABELS})")

    def load(self):
        if self.volume is None:
            if self.path is None:
                raise DataError(f"sample {self.subject_id} has neither volume nor path")
            self.volume = read_volume(self.path)
        return self.volume


@dataclass
class Dataset:
    samples: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def cube(self):
        return int(self.meta.get("cube", FULL_CUBE))

    def class_counts(self):
        counts = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def task_subset(self, task):
        """Samples of a one-versus-one task; label 1 is ``task[0]``, 0 is ``task[1]``."""
        a, b = task
        if a == b or a not in LABELS or b not in LABELS:
            raise ConfigError(f"invalid task {task!r}")
        return [s for s in self.samples if s.label in (a, b)]

    def task_arrays(self, task):
        """``(X, y, subject_ids)`` for a task, with volumes stacked as float32."""
        subset = self.task_subset(task)
        if not subset:
            raise DataError(f"no samples for task {task}")
        X = np.stack([np.asarray(s.load(), dtype=np.float32) for s in subset])
        y = np.array([1 if s.label == task[0] else 0 for s in subset], dtype=np.int64)
        return X, y, [s.subject_id for s in subset]


def dedup_first_scan(samples, meta=None):
    """Keep only the earliest acquisition of every subject."""
    seen = set()
    first = {}
    order = []
    for s in samples:
        key = (s.subject_id, s.acquisition_index)
        if key in seen:
            raise DataError(f"duplicate scan (subject {s.subject_id!r}, acquisition {s.acquisition_index})")
        seen.add(key)
        if s.subject_id not in first:
            order.append(s.subject_id)
            first[s.subject_id] = s
        elif s.acquisition_index < first[s.subject_id].acquisition_index:
            first[s.subject_id] = s
    return Dataset([first[k] for k in order], dict(meta or {}))


# ---------------------------------------------------------------- batching


@dataclass
class BatchPlan:
    c: int
    b: int
    batches: list

    def sizes(self):
        return [len(x) for x in self.batches]


def balanced_batch_plan(labels, b, seed):
    """Mini-batches that each hold at least one sample of every class.

    Per-class lists are shuffled; each batch first takes one sample from every
    class, then fills up to ``b`` from a shuffled pool of the rest. Batches
    have exactly ``b`` members except the last one, which is dropped if fewer
    than ``c`` samples remain for it. Classes smaller than the batch count are
    cycled so every batch still gets its reserved member.
    """
    labels = np.asarray(labels)
    classes = sorted(np.unique(labels).tolist())
    c = len(classes)
    if c == 0:
        raise ConfigError("cannot plan batches over an empty label set")
    if b < c:
        raise ConfigError(f"batch size {b} is smaller than the number of classes {c}")
    rng = np.random.default_rng(seed)
    n = len(labels)
    sizes = [b] * (n // b)
    if n % b >= c:
        sizes.append(n % b)
    if not sizes:
        sizes = [n]
    nb = len(sizes)
    per_class = [rng.permutation(np.flatnonzero(labels == k)) for k in classes]
    reserved = [[pc[i % len(pc)] for i in range(nb)] for pc in per_class]
    used = {int(i) for pc in per_class for i in pc[:nb]}
    pool = rng.permutation([i for i in range(n) if i not in used])
    batches = []
    cursor = 0
    for t, size in enumerate(sizes):
        head = [int(r[t]) for r in reserved]
        fill = pool[cursor:cursor + size - c]
        cursor += len(fill)
        batch = head + [int(i) for i in fill]
        batches.append([batch[i] for i in rng.permutation(len(batch))])
    return BatchPlan(c, b, batches)


def balanced_batches(dataset, task, b, seed):
    """Balanced plan over the task-filtered samples (indices refer to that subset)."""
    subset = dataset.task_subset(task)
    labels = [1 if s.label == task[0] else 0 for s in subset]
    for cls in task:
        if cls not in {s.label for s in subset}:
            raise ConfigError(f"task class {cls} has no samples")
    return balanced_batch_plan(labels, b, seed)


def naive_batch_plan(labels, b, seed):
    """Shuffle-and-chunk baseline with no class guarantee."""
    labels = np.asarray(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    batches = [order[i:i + b].tolist() for i in range(0, len(order), b)]
    return BatchPlan(len(np.unique(labels)), b, batches)


def single_class_batches(plan, labels):
    labels = np.asarray(labels)
    return sum(1 for batch in plan.batches if len(np.unique(labels[batch])) < 2)


# ---------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    n_folds: int
    repeats: int
    assignments: np.ndarray  # (repeats, n) fold index per sample

    def split(self, repeat, fold):
        """``(train_idx, val_idx)`` for one repeat/fold pair."""
        a = self.assignments[repeat]
        return np.flatnonzero(a != fold), np.flatnonzero(a == fold)

    def __iter__(self):
        for r in range(self.repeats):
            for f in range(self.n_folds):
                yield r, f, *self.split(r, f)


def stratified_folds(labels, n_folds=5, repeats=5, seed=0):
    """Repeated stratified k-fold assignment.

    Within a class the shuffled members are dealt round-robin onto folds; the
    starting fold rotates from class to class so overall fold sizes stay
    within one sample of each other.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2")
    for cls, cnt in zip(classes, counts):
        if cnt < n_folds:
            raise ConfigError(f"class {cls!r} has {cnt} samples, fewer than {n_folds} folds")
    rng = np.random.default_rng(seed)
    out = np.empty((repeats, len(labels)), dtype=np.int64)
    for r in range(repeats):
        offset = 0
        for cls in classes:
            members = rng.permutation(np.flatnonzero(labels == cls))
            out[r, members] = (offset + np.arange(len(members))) % n_folds
            offset = (offset + len(members)) % n_folds
    return FoldSplit(n_folds, repeats, out)


# ---------------------------------------------------------------- synthetic data


def _grid(cube):
    ax = (np.arange(cube) + 0.5) / cube * 2.0 - 1.0
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _ellipsoid(cube, center, radii):
    z, y, x = _grid(cube)
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip((z, y, x), center, radii))
    return r <= 1.0


def signature_regions(cube):
    """Boolean masks of the two class-signature regions: (central, offset)."""
    central = _ellipsoid(cube, (0.0, 0.0, 0.0), (0.22, 0.16, 0.2))
    offset = _ellipsoid(cube, (-0.15, 0.4, 0.35), (0.14, 0.14, 0.14))
    return central, offset


def signature_mask(cube):
    central, offset = signature_regions(cube)
    return central | offset


def generate_synthetic(n_per_class, classes=("AD", "NC"), cube=32, separability=1.0, seed=0):
    """Brain-like volumes whose signature regions darken with class severity.

    Every volume is a bright sphere plus spatially smoothed noise. Inside the
    central and offset ellipsoids intensity drops by
    ``0.5 * separability * severity``; with ``separability == 0`` all classes
    share one distribution.
    """
    if cube < 16:
        raise ConfigError("cube must be >= 16")
    if not 0.0 <= separability <= 1.0:
        raise ConfigError("separability must lie in [0, 1]")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    z, y, x = _grid(cube)
    brain = gaussian_filter((z ** 2 + y ** 2 + x ** 2 <= 0.85 ** 2).astype(np.float64), 1.0)
    region = signature_mask(cube).astype(np.float64)
    sigma = max(1.0, cube / 32.0)
    samples = []
    for label in classes:
        if label not in LABELS:
            raise DataError(f"unknown label {label!r}")
        severity = SEVERITY[label]
        for i in range(n_per_class):
            noise = gaussian_filter(rng.standard_normal((cube,) * 3), sigma)
            noise *= 0.1 / max(noise.std(), 1e-12)
            gain = 1.0 + 0.05 * rng.standard_normal()
            vol = brain * (gain + noise) - 0.5 * separability * severity * region * brain
            vol = np.clip(vol, 0.0, None).astype(np.float32)
            samples.append(LabeledSample(f"SYN-{label}-{i:04d}", 0, label, vol))
    meta = {"cube": cube, "separability": separability, "seed": seed, "source": "synthetic"}
    return Dataset(samples, meta)


# ---------------------------------------------------------------- file formats


def write_volume(path, volume):
    """Write a volume (array or :class:`LabeledSample`) as header + little-endian f32."""
    if isinstance(volume, LabeledSample):
        volume = volume.load()
    arr = np.ascontiguousarray(volume, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_VOL_PREAMBLE.pack(VOLUME_MAGIC, VOLUME_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_volume(path, expected_shape=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _VOL_PREAMBLE.size:
        raise TruncationError(f"{path}: shorter than the volume header")
    magic, version, ndim = _VOL_PREAMBLE.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise DataError(f"{path}: unsupported volume version {version}")
    off = _VOL_PREAMBLE.size
    if ndim < 1 or len(blob) < off + 4 * ndim:
        raise TruncationError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    if 0 in shape:
        raise DataError(f"{path}: zero extent in {shape}")
    if expected_shape is not None and tuple(shape) != tuple(expected_shape):
        raise DataError(f"{path}: shape {shape} != expected {tuple(expected_shape)}")
    count = int(np.prod(shape))
    if len(blob) - off < 4 * count:
        raise TruncationError(f"{path}: header declares {count} voxels but only {(len(blob) - off) // 4} present")
    if len(blob) - off > 4 * count:
        raise DataError(f"{path}: trailing bytes after voxel data")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)


def save_manifest(dataset, path):
    """Line-delimited ``subject_id, acquisition_index, label, path`` records (tab separated)."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(dataset.meta):
            fh.write(f"# {key}: {dataset.meta[key]}\n")
        for s in dataset.samples:
            rel = os.path.relpath(s.path, base) if s.path else ""
            fh.write(f"{s.subject_id}\t{s.acquisition_index}\t{s.label}\t{rel}\n")


def load_manifest(path, dedup=True):
    """Parse a manifest; volumes load lazily. Applies first-scan dedup by default."""
    base = os.path.dirname(os.path.abspath(path))
    meta, samples = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            sid, acq, label, rel = parts
            try:
                acq = int(acq)
            except ValueError:
                raise DataError(f"{path}:{lineno}: acquisition index {acq!r} is not an integer") from None
            if label not in LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            samples.append(LabeledSample(sid, acq, label, None, os.path.join(base, rel) if rel else None))
    if "cube" in meta:
        meta["cube"] = int(meta["cube"])
    if dedup:
        return dedup_first_scan(samples, meta)
    return Dataset(samples, meta)


def save_dataset(dataset, directory):
    """Write every volume plus ``manifest.tsv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for s in dataset.samples:
        fname = f"{s.subject_id}_{s.acquisition_index}.vol"
        write_volume(os.path.join(directory, fname), s.load())
        s.path = os.path.join(directory, fname)
    path = os.path.join(directory, MANIFEST_NAME)
    save_manifest(dataset, path)
    return path


def load_dataset(path):
    """Load a manifest (file or directory holding ``manifest.tsv``) and check volume extents."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    ds = load_manifest(path)
    cube = ds.cube
    for s in ds.samples:
        vol = read_volume(s.path, expected_shape=(cube,) * 3)
        if not np.all(np.isfinite(vol)) or vol.min() < 0:
            raise DataError(f"{s.path}: intensities must be finite and >= 0")
        s.volume = vol
    return ds
