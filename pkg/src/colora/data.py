"""Dataset archives, split handling, class balancing and entropy-based distillation.

A dataset directory holds, for each split ``s`` in ``train``, ``val`` and
``test``::

    s_images.cot1     u8 (N, H, W, C)
    s_labels.cot1     u8 or i64 (N,)
    s_manifest.txt    one sample id per line, in row order

and optionally ``classes.txt`` with one class name per line, which fixes the
class count.  A ``.cot1`` file is ``b"COT1"``, a u8 dtype code (0 = f32,
1 = u8, 2 = i64), a u8 rank, the dims as little-endian u32, then the raw
little-endian payload.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import entr

__all__ = [
    "COT1_MAGIC",
    "DatasetError",
    "InsufficientSamplesError",
    "Split",
    "DatasetSplits",
    "DistillReport",
    "write_cot1",
    "read_cot1",
    "save_dataset",
    "load_dataset",
    "balance_by_first_n",
    "predictive_entropy",
    "distill_by_entropy",
    "distill",
    "make_blobs_task",
    "make_shapes_task",
]

COT1_MAGIC = b"COT1"
SPLITS = ("train", "val", "test")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("int64"): 2}

PathLike = Union[str, os.PathLike]


class DatasetError(ValueError):
    pass


class InsufficientSamplesError(DatasetError):
    def __init__(self, shortfall: dict[int, int], needed: int):
        self.shortfall = shortfall
        detail = ", ".join(f"class {c}: short by {n}" for c, n in sorted(shortfall.items()))
        super().__init__(f"need {needed} samples per class; {detail}")


# ---------------------------------------------------------------------------
# archive format
# ---------------------------------------------------------------------------

def write_cot1(path: PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise DatasetError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    header = COT1_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_cot1(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != COT1_MAGIC:
        raise DatasetError(f"{path}: not a COT1 archive")
    if len(buf) < 6:
        raise DatasetError(f"{path}: truncated header")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise DatasetError(f"{path}: unknown dtype code {code}")
    if len(buf) < 6 + 4 * ndim:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    dtype = _DTYPES[code]
    offset = 6 + 4 * ndim
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise DatasetError(f"{path}: payload is {len(buf) - offset} bytes, shape {dims} needs {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray
    ids: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = [str(i) for i in self.ids]
        n = len(self.ids)
        if self.images.shape[0] != n or self.labels.shape != (n,):
            raise DatasetError(f"split sizes disagree: images {self.images.shape[0]}, "
                               f"labels {self.labels.shape}, ids {n}")
        if len(set(self.ids)) != n:
            raise DatasetError("sample ids are not unique within the split")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "Split":
        index = np.asarray(index, dtype=np.int64)
        return Split(self.images[index], self.labels[index], [self.ids[i] for i in index])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass
class DatasetSplits:
    train: Split
    val: Split
    test: Split
    num_classes: int
    class_names: Optional[list] = None

    def __post_init__(self):
        for name in SPLITS:
            labels = getattr(self, name).labels
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{name} labels outside [0, {self.num_classes})")

    def __getitem__(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    @property
    def image_shape(self) -> tuple:
        return self.train.images.shape[1:]

    def replace(self, **splits) -> "DatasetSplits":
        parts = {name: splits.get(name, getattr(self, name)) for name in SPLITS}
        return DatasetSplits(**parts, num_classes=self.num_classes, class_names=self.class_names)


def _to_u8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(ds: DatasetSplits, directory: PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        split = ds[name]
        write_cot1(directory / f"{name}_images.cot1", _to_u8(split.images))
        labels = split.labels.astype(np.uint8) if ds.num_classes <= 256 else split.labels
        write_cot1(directory / f"{name}_labels.cot1", labels)
        (directory / f"{name}_manifest.txt").write_text("".join(f"{i}\n" for i in split.ids), encoding="utf-8")
    names = ds.class_names or [str(i) for i in range(ds.num_classes)]
    (directory / "classes.txt").write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def load_dataset(directory: PathLike, num_classes: Optional[int] = None) -> DatasetSplits:
    """Read the three splits from ``directory``.

    The class count comes from ``num_classes``, else ``classes.txt``, else
    one more than the largest label seen.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    class_names = None
    names_file = directory / "classes.txt"
    if names_file.exists():
        class_names = [ln for ln in names_file.read_text(encoding="utf-8").splitlines() if ln]
        num_classes = num_classes or len(class_names)

    raw = {}
    for name in SPLITS:
        paths = [directory / f"{name}_{part}" for part in ("images.cot1", "labels.cot1", "manifest.txt")]
        for p in paths:
            if not p.exists():
                raise FileNotFoundError(f"missing dataset file {p}")
        images = read_cot1(paths[0])
        labels = read_cot1(paths[1])
        ids = paths[2].read_text(encoding="utf-8").splitlines()
        if images.ndim != 4:
            raise DatasetError(f"{paths[0]}: expected (N, H, W, C), got {images.shape}")
        if labels.ndim != 1 or labels.dtype == np.float32:
            raise DatasetError(f"{paths[1]}: labels must be an integer vector")
        if not (images.shape[0] == labels.shape[0] == len(ids)):
            raise DatasetError(f"{name}: {images.shape[0]} images, {labels.shape[0]} labels, {len(ids)} ids")
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / np.float32(255.0)
        raw[name] = (images, labels.astype(np.int64), ids)

    if num_classes is None:
        num_classes = int(max(r[1].max(initial=-1) for r in raw.values())) + 1
    for name, (_, labels, _) in raw.items():
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"{name} labels outside [0, {num_classes})")
    shapes = {r[0].shape[1:] for r in raw.values()}
    if len(shapes) != 1:
        raise DatasetError(f"image shapes differ across splits: {shapes}")
    return DatasetSplits(*(Split(*raw[n]) for n in SPLITS), num_classes=num_classes,
                         class_names=class_names)


def _id_key(sample_id: str) -> bytes:
    return sample_id.encode("utf-8")


def balance_by_first_n(split: Split, n: Union[int, str] = "min", num_classes: Optional[int] = None) -> Split:
    """Keep the first ``n`` samples of every class by byte-wise id order.

    ``n="min"`` uses the smallest class count.  The result is ordered by id.
    """
    K = num_classes or (int(split.labels.max()) + 1 if len(split) else 0)
    counts = split.class_counts(K)
    if n == "min":
        n = int(counts.min())
    n = int(n)
    short = {c: n - int(k) for c, k in enumerate(counts) if k < n}
    if short:
        raise InsufficientSamplesError(short, n)
    order = sorted(range(len(split)), key=lambda i: _id_key(split.ids[i]))
    taken = np.zeros(K, dtype=np.int64)
    keep = []
    for i in order:
        c = split.labels[i]
        if taken[c] < n:
            taken[c] += 1
            keep.append(i)
    return split.subset(keep)


def predictive_entropy(probs) -> np.ndarray:
    """Natural-log entropy of each probability row, with ``0 ln 0 = 0``.

    Rows are renormalized when they sum to 1 within 1e-5; larger deviations
    and negative entries are rejected.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected (N, K) probabilities, got {p.shape}")
    if (p < 0).any():
        raise ValueError("negative probability")
    sums = p.sum(axis=1, keepdims=True)
    if p.size and np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("probability rows must sum to 1")
    return entr(p / sums).sum(axis=1)


@dataclass
class DistillReport:
    entropies: dict = field(default_factory=dict)
    discarded: list = field(default_factory=list)
    retained: list = field(default_factory=list)

    def to_csv(self) -> str:
        """One row per sample: class, rank by descending entropy, id, entropy, status."""
        kept, dropped = set(self.retained), set(self.discarded)
        lines = ["class,rank,sample_id,entropy,status"]
        for c in sorted(self.entropies):
            for rank, (sid, h) in enumerate(self.entropies[c]):
                status = "retained" if sid in kept else ("discarded" if sid in dropped else "unused")
                lines.append(f"{c},{rank},{sid},{h!r},{status}")
        return "\n".join(lines) + "\n"


def distill_by_entropy(split: Split, entropy, discard_top: int, keep: int,
                       num_classes: Optional[int] = None) -> tuple[Split, DistillReport]:
    """Per class: sort by entropy (descending, ties by id), drop ``discard_top``, keep the next ``keep``.

    Retained samples stay in their original row order.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    if entropy.shape != (len(split),):
        raise ValueError("one entropy value per sample is required")
    if discard_top < 0 or keep < 0:
        raise ValueError("discard_top and keep must be nonnegative")
    K = num_classes or (int(split.labels.max()) + 1 if len(split) else 0)
    counts = split.class_counts(K)
    needed = discard_top + keep
    short = {c: needed - int(k) for c, k in enumerate(counts) if k < needed}
    if short:
        raise InsufficientSamplesError(short, needed)

    report = DistillReport()
    kept_rows = []
    for c in range(K):
        rows = np.flatnonzero(split.labels == c)
        rows = sorted(rows, key=lambda i: (-entropy[i], _id_key(split.ids[i])))
        report.entropies[c] = [(split.ids[i], float(entropy[i])) for i in rows]
        report.discarded += [split.ids[i] for i in rows[:discard_top]]
        chosen = rows[discard_top:discard_top + keep]
        report.retained += [split.ids[i] for i in chosen]
        kept_rows += list(chosen)
    return split.subset(sorted(kept_rows)), report


def distill(split: Split, model, discard_top: int = 10, keep: int = 7040,
            num_classes: Optional[int] = None, batch_size: int = 256) -> tuple[Split, DistillReport]:
    """Entropy distillation using the softmax output of ``model`` (a ModelGraph)."""
    probs = model.predict_proba(split.images, batch_size=batch_size)
    return distill_by_entropy(split, predictive_entropy(probs), discard_top, keep,
                              num_classes or model.num_classes)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def _ids(prefix: str, n: int) -> list:
    width = max(5, len(str(n)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _splits_from(make, counts: dict, num_classes: int, rng) -> DatasetSplits:
    parts = {}
    for name in SPLITS:
        images, labels = make(counts[name], rng)
        parts[name] = Split(images, labels, _ids(f"{name}_", len(labels)))
    return DatasetSplits(**parts, num_classes=num_classes)


def make_blobs_task(n_train: int = 200, n_val: int = 50, n_test: int = 50, size: int = 16,
                    num_classes: int = 2, seed: int = 0) -> DatasetSplits:
    """Single-channel images of one elongated Gaussian blob on a noisy background.

    The blob sits at a random position; its orientation encodes the class
    (``180 / num_classes`` degrees apart).
    """
    if not 2 <= num_classes <= 8:
        raise ValueError("blobs task supports 2 to 8 classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    long_axis, short_axis = size / 5, size / 16

    def make(n, rng):
        labels = rng.integers(0, num_classes, size=n)
        images = np.empty((n, size, size, 1), dtype=np.float32)
        for i, c in enumerate(labels):
            cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
            angle = np.pi * c / num_classes + rng.normal(0, 0.05)
            u = np.cos(angle) * (xx - cx) + np.sin(angle) * (yy - cy)
            v = -np.sin(angle) * (xx - cx) + np.cos(angle) * (yy - cy)
            blob = np.exp(-0.5 * ((u / long_axis) ** 2 + (v / short_axis) ** 2))
            images[i, ..., 0] = np.clip(0.8 * blob + rng.normal(0.1, 0.05, size=blob.shape), 0, 1)
        return images, labels

    return _splits_from(make, {"train": n_train, "val": n_val, "test": n_test}, num_classes, rng)


def _stripes(size: int, angle: float, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = np.cos(angle) * xx + np.sin(angle) * yy
    return 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)


def make_shapes_task(domain: str = "source", n_train: int = 400, n_val: int = 100, n_test: int = 200,
                     size: int = 16, seed: int = 0, noise: float = 0.15) -> DatasetSplits:
    """Four-class oriented-texture task in two domains.

    ``source`` classes are stripe orientations 0, 45, 90 and 135 degrees at a
    coarse period.  ``target`` keeps the four-way orientation structure but
    shifts it: orientations rotate by 22.5 degrees, the period shrinks and
    contrast is inverted, so features tuned to the source transfer only in
    part.
    """
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    rng = np.random.default_rng(seed if domain == "source" else seed + 7919)
    base_angles = np.deg2rad([0.0, 45.0, 90.0, 135.0])
    if domain == "source":
        angles, period, sign = base_angles, 6.0, 1.0
    else:
        angles, period, sign = base_angles + np.deg2rad(22.5), 3.5, -1.0

    def make(n, rng):
        labels = rng.integers(0, 4, size=n)
        images = np.empty((n, size, size, 1), dtype=np.float32)
        for i, c in enumerate(labels):
            angle = angles[c] + rng.normal(0, np.deg2rad(4))
            img = _stripes(size, angle, period * rng.uniform(0.9, 1.1), rng.uniform(0, 2 * np.pi))
            if sign < 0:
                img = 1.0 - img
            img = img * rng.uniform(0.6, 1.0) + rng.normal(0, noise, size=img.shape)
            images[i, ..., 0] = np.clip(img, 0, 1)
        return images, labels

    return _splits_from(make, {"train": n_train, "val": n_val, "test": n_test}, 4, rng)
