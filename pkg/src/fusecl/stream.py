"""Class-incremental data streaming, packed dataset I/O and exemplar memory."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

NATURAL = "natural"
MAGIC = b"CLIS"
_HEADER = struct.Struct("<4sIIII")
_LABEL = struct.Struct("<H")


class DatasetFormatError(ValueError):
    """Raised when a packed dataset file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """A set of labelled images, ``images`` shaped (N, H, W, C) uint8."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def select(self, mask_or_index) -> "Dataset":
        return Dataset(self.images[mask_or_index], self.labels[mask_or_index], self.num_classes)

    def of_classes(self, classes: Sequence[int]) -> "Dataset":
        return self.select(np.isin(self.labels, np.asarray(list(classes), dtype=np.int64)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            max(p.num_classes for p in parts),
        )


# --------------------------------------------------------------------------
# packed binary format


def write_packed_dataset(path, dataset: Dataset) -> None:
    n, h, w, c = dataset.images.shape
    if len(dataset) and dataset.labels.max() > 0xFFFF:
        raise ValueError("labels must fit in 16 bits")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, h, w, c))
        for img, label in zip(dataset.images, dataset.labels):
            f.write(_LABEL.pack(int(label)))
            f.write(np.ascontiguousarray(img).tobytes())


def read_packed_dataset(path, num_classes: int | None = None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(data))
    magic, n, h, w, c = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    rec = _LABEL.size + h * w * c
    expected = _HEADER.size + n * rec
    if len(data) < expected:
        # offset of the first incomplete record
        full = (len(data) - _HEADER.size) // rec
        raise DatasetFormatError(
            f"truncated file: header declares {n} records, only {full} complete",
            _HEADER.size + full * rec,
        )
    if len(data) > expected:
        raise DatasetFormatError("trailing bytes after last record", expected)
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size, count=n * rec).reshape(n, rec)
    labels = body[:, :2].copy().view("<u2").reshape(n).astype(np.int64)
    images = body[:, 2:].reshape(n, h, w, c).copy()
    return Dataset(images, labels, num_classes)


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian-blob image generator."""

    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    size: int = 16
    channels: int = 3
    blobs_per_class: int = 3
    blob_sigma: float = 2.0
    jitter: float = 1.5
    amplitude_noise: float = 0.3
    pixel_noise: float = 0.35
    distractors: int = 2
    seed: int = 0


def _render_blobs(size, centers, sigmas, colors):
    # centers (B, 2), sigmas (B,), colors (B, C) -> (size, size, C)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    g = np.exp(-d2 / (2 * sigmas[:, None, None] ** 2))
    return np.einsum("bhw,bc->hwc", g, colors)


def make_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Generate a (train, test) pair deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    s, C, K = spec.size, spec.channels, spec.blobs_per_class
    protos = []
    for _ in range(spec.num_classes):
        centers = rng.uniform(2, s - 3, size=(K, 2))
        sigmas = spec.blob_sigma * rng.uniform(0.7, 1.3, size=K)
        colors = rng.uniform(-1, 1, size=(K, C))
        protos.append((centers, sigmas, colors))

    def sample(count):
        imgs, labels = [], []
        for cls, (centers, sigmas, colors) in enumerate(protos):
            for _ in range(count):
                c = centers + rng.normal(0, spec.jitter, size=centers.shape)
                a = colors * (1 + rng.normal(0, spec.amplitude_noise, size=(K, 1)))
                img = _render_blobs(s, c, sigmas, a)
                if spec.distractors:
                    dc = rng.uniform(0, s - 1, size=(spec.distractors, 2))
                    ds = spec.blob_sigma * rng.uniform(0.7, 1.3, size=spec.distractors)
                    dcol = rng.uniform(-1, 1, size=(spec.distractors, C))
                    img = img + _render_blobs(s, dc, ds, dcol)
                img = img + rng.normal(0, spec.pixel_noise, size=img.shape)
                imgs.append(np.clip(128 + 60 * img, 0, 255).astype(np.uint8))
                labels.append(cls)
        return Dataset(np.stack(imgs), np.array(labels), spec.num_classes)

    return sample(spec.train_per_class), sample(spec.test_per_class)


# --------------------------------------------------------------------------
# class order and rounds


@dataclass(frozen=True)
class ClassOrder:
    permutation: tuple[int, ...]
    seed: int | str

    def __len__(self) -> int:
        return len(self.permutation)


def make_class_order(num_classes: int, seed: int | str) -> ClassOrder:
    """Permutation of ``range(num_classes)``; ``seed="natural"`` gives identity order."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be positive, got {num_classes}")
    if seed == NATURAL:
        return ClassOrder(tuple(range(num_classes)), seed)
    perm = np.random.default_rng(int(seed)).permutation(num_classes)
    return ClassOrder(tuple(int(i) for i in perm), int(seed))


@dataclass
class TaskStream:
    """Rounds of novel classes carved out of a class order.

    Labels handed out by the stream are *positions* in the class order, so the
    classes introduced at round t occupy the contiguous logit block
    ``[offsets[t], offsets[t] + round_sizes[t])``.
    """

    order: ClassOrder
    round_sizes: tuple[int, ...]
    train: Dataset | None = None
    test: Dataset | None = None

    def __post_init__(self):
        self.offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.round_sizes)]))
        if self.train is not None:
            self._train = self._relabel(self.train)
            self._test = self._relabel(self.test) if self.test is not None else None

    @property
    def num_rounds(self) -> int:
        return len(self.round_sizes)

    def round_classes(self, t: int) -> list[int]:
        """Original class ids introduced at round ``t`` (1-based)."""
        self._check_round(t)
        return list(self.order.permutation[self.offsets[t - 1] : self.offsets[t]])

    def round_positions(self, t: int) -> range:
        self._check_round(t)
        return range(self.offsets[t - 1], self.offsets[t])

    def seen_count(self, t: int) -> int:
        return self.offsets[t]

    def round_of(self, position: int) -> int:
        return int(np.searchsorted(self.offsets, position, side="right"))

    def train_data(self, t: int) -> Dataset:
        return self._slice(self._train, self.round_positions(t))

    def test_data(self, t: int) -> Dataset:
        return self._slice(self._test, self.round_positions(t))

    def test_seen(self, t: int) -> Dataset:
        return self._slice(self._test, range(0, self.offsets[t]))

    def checksum(self) -> str:
        h = hashlib.sha256(repr((self.order.permutation, self.round_sizes)).encode())
        for ds in (self._train, self._test):
            if ds is not None:
                h.update(ds.checksum().encode())
        return h.hexdigest()

    def _check_round(self, t):
        if not 1 <= t <= self.num_rounds:
            raise IndexError(f"round {t} outside 1..{self.num_rounds}")

    def _relabel(self, ds: Dataset) -> Dataset:
        lookup = np.full(len(self.order), -1, dtype=np.int64)
        lookup[list(self.order.permutation)] = np.arange(len(self.order))
        keep = np.isin(ds.labels, self.order.permutation[: self.offsets[-1]])
        pos = lookup[ds.labels[keep]]
        return Dataset(ds.images[keep], pos, self.offsets[-1])

    @staticmethod
    def _slice(ds, positions):
        if ds is None:
            raise ValueError("stream has no data attached")
        return ds.select((ds.labels >= positions.start) & (ds.labels < positions.stop))


def split_rounds(order: ClassOrder, round_sizes: Sequence[int], train: Dataset | None = None,
                 test: Dataset | None = None) -> TaskStream:
    sizes = tuple(int(s) for s in round_sizes)
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError(f"round sizes must be positive, got {list(round_sizes)}")
    if sum(sizes) > len(order):
        raise ValueError(f"round sizes sum to {sum(sizes)} but only {len(order)} classes exist")
    return TaskStream(order, sizes, train, test)


# --------------------------------------------------------------------------
# herding and exemplar memory


def herding_select(features: np.ndarray, k: int) -> list[int]:
    """Greedy herding: indices whose running mean best tracks the class mean.

    At step s the unchosen candidate minimising
    ``|| mu - (sum_chosen + phi) / s ||`` is appended. Ties go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("herding needs a non-empty (n, d) feature matrix")
    n = len(features)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    chosen = []
    for step in range(1, k + 1):
        dist = np.linalg.norm(mu - (running + features) / step, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += features[i]
    return chosen


@dataclass
class ExemplarMemory:
    """Per-class exemplar store; each class keeps its herding-ordered list."""

    budget: int
    images: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.images.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.images)

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in sorted(self.images.items())}

    def as_dataset(self, num_classes: int | None = None) -> Dataset:
        if not self.images:
            raise ValueError("memory is empty")
        cls = self.classes
        imgs = np.concatenate([self.images[c] for c in cls])
        labels = np.concatenate([np.full(len(self.images[c]), c) for c in cls])
        return Dataset(imgs, labels, num_classes or (max(cls) + 1))

    def quota(self, total_classes: int) -> int:
        if total_classes <= 0:
            raise ValueError("total_classes must be positive")
        q = self.budget // total_classes
        if q == 0:
            raise RuntimeError(
                f"memory budget {self.budget} cannot hold one exemplar for each of {total_classes} classes"
            )
        return q


def update_memory(memory: ExemplarMemory, new_class_features: dict, total_classes: int) -> ExemplarMemory:
    """Shrink old classes to the new quota and herd exemplars for new classes.

    ``new_class_features`` maps class -> (images, features); images are the
    candidates in dataset order, features their rows used for herding.
    """
    q = memory.quota(total_classes)
    out = ExemplarMemory(memory.budget, {c: v[:q] for c, v in memory.images.items()})
    for c, (images, feats) in sorted(new_class_features.items()):
        if c in out.images:
            raise ValueError(f"class {c} already stored in memory")
        idx = herding_select(feats, min(q, len(feats)))
        out.images[c] = np.asarray(images)[idx]
    assert len(out) <= out.budget
    return out


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterator[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def horizontal_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, ::-1]
    return out


def to_tensor_batch(images: np.ndarray):
    """uint8 NHWC -> float32 NCHW scaled to roughly [-1, 1]."""
    import torch

    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x.sub_(127.5).div_(127.5)


__all__ = [
    "ClassOrder", "Dataset", "DatasetFormatError", "ExemplarMemory", "NATURAL", "SyntheticSpec",
    "TaskStream", "herding_select", "make_class_order", "make_synthetic", "read_packed_dataset",
    "split_rounds", "update_memory", "write_packed_dataset",
]
