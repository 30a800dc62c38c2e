"""Datasets, augmentation, and deterministic batch streams.

Three sources share one in-memory format (images as float32 in
[0, 255], channel-first):

- CIFAR-10 binary batches: 3073-byte records, one label byte then three
  1024-byte channel planes, row-major.
- MNIST IDX files (big-endian magic 2051 for images, 2049 for labels);
  the 28x28 digits are zero-padded to 32x32 so the same architectures
  apply.
- A synthetic generator: per-class low-frequency templates plus Gaussian
  pixel noise, integer-valued, so it can be written out as CIFAR-format
  binaries and read back through the real loader.

Everything random is keyed by explicit (seed, epoch) pairs and
per-example parameter arrays, so batch contents do not depend on who
consumes the stream or when; the prefetcher can run ahead without
changing anything.
"""
from __future__ import annotations

import os
import queue
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataError

__all__ = [
    "Dataset", "AugmentConfig", "load_cifar10", "write_cifar10", "load_mnist",
    "synthesize", "augment", "standardize_per_image", "batches", "DataFeed",
    "Prefetcher", "balanced_subset",
]

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray  # (N, C, H, W) float32, raw [0, 255]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} do not match "
                            f"labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError(f"label outside 0..{self.num_classes - 1} in {self.name}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def hw(self) -> int:
        return self.images.shape[2]


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"missing dataset file {path}")
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DataError(f"{path}: {raw.size} bytes is not a whole number of "
                        f"{CIFAR_RECORD}-byte records")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: corrupt record, label {labels.max()} > 9")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    return images, labels


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """Read data_batch_*.bin and test_batch.bin from a directory."""
    train_files = sorted(
        f for f in (os.listdir(directory) if os.path.isdir(directory) else [])
        if f.startswith("data_batch") and f.endswith(".bin"))
    if not os.path.isdir(directory):
        raise DataError(f"dataset directory {directory} does not exist")
    if not train_files:
        raise DataError(f"no data_batch_*.bin files in {directory}")
    test_path = os.path.join(directory, "test_batch.bin")
    if not os.path.exists(test_path):
        raise DataError(f"missing {test_path}")
    xs, ys = [], []
    for f in train_files:
        x, y = _read_cifar_file(os.path.join(directory, f))
        xs.append(x)
        ys.append(y)
    train = Dataset("cifar10", "train", np.concatenate(xs), np.concatenate(ys), 10)
    xt, yt = _read_cifar_file(test_path)
    test = Dataset("cifar10", "test", xt, yt, 10)
    return train, test


def write_cifar10(train: Dataset, test: Dataset, directory: str,
                  n_train_files: int = 5) -> None:
    """Write datasets in the CIFAR-10 binary batch layout.

    Pixel values must already be integers in [0, 255]; this is the
    inverse of :func:`load_cifar10` for such data.
    """
    os.makedirs(directory, exist_ok=True)

    def _write(ds: Dataset, path: str, lo: int, hi: int) -> None:
        imgs = ds.images[lo:hi]
        labs = ds.labels[lo:hi]
        if imgs.shape[1:] != (3, 32, 32):
            raise DataError(f"CIFAR layout needs (3, 32, 32) images, got {imgs.shape[1:]}")
        pix = np.rint(imgs).astype(np.uint8).reshape(hi - lo, 3072)
        if not np.allclose(imgs, pix.reshape(imgs.shape), atol=0.5):
            raise DataError("images are not integer-valued in [0, 255]")
        recs = np.empty((hi - lo, CIFAR_RECORD), dtype=np.uint8)
        recs[:, 0] = labs
        recs[:, 1:] = pix
        recs.tofile(path)

    n = len(train)
    cuts = [round(i * n / n_train_files) for i in range(n_train_files + 1)]
    shard = 0
    for i in range(n_train_files):
        if cuts[i + 1] == cuts[i]:  # tiny datasets fill fewer shards
            continue
        shard += 1
        _write(train, os.path.join(directory, f"data_batch_{shard}.bin"),
               cuts[i], cuts[i + 1])
    _write(test, os.path.join(directory, "test_batch.bin"), 0, len(test))


def _read_idx(path: str, magic_want: int) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"missing dataset file {path}")
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != magic_want:
        raise DataError(f"{path}: IDX magic {magic}, expected {magic_want}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}i", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload {data.size} bytes, header says {dims}")
    return data.reshape(dims)


def load_mnist(directory: str) -> tuple[Dataset, Dataset]:
    """Read the four IDX files; digits are zero-padded from 28x28 to 32x32."""
    def _load(split: str, img_file: str, lab_file: str) -> Dataset:
        imgs = _read_idx(os.path.join(directory, img_file), 2051)
        labs = _read_idx(os.path.join(directory, lab_file), 2049)
        if imgs.shape[0] != labs.shape[0]:
            raise DataError(f"{split}: {imgs.shape[0]} images vs {labs.shape[0]} labels")
        pad = (32 - imgs.shape[1]) // 2
        imgs = np.pad(imgs, ((0, 0), (pad, pad), (pad, pad)))
        return Dataset("mnist", split, imgs[:, None].astype(np.float32),
                       labs.astype(np.int64), 10)

    train = _load("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    test = _load("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return train, test


def _bilinear_upsample(grid: np.ndarray, hw: int) -> np.ndarray:
    """(..., gh, gw) -> (..., hw, hw) bilinear, edge-clamped."""
    gh = grid.shape[-1]
    pos = (np.arange(hw) + 0.5) * gh / hw - 0.5
    i0 = np.clip(np.floor(pos).astype(int), 0, gh - 1)
    i1 = np.clip(i0 + 1, 0, gh - 1)
    frac = np.clip(pos - np.floor(pos), 0.0, 1.0)
    rows = grid[..., i0, :] * (1 - frac)[:, None] + grid[..., i1, :] * frac[:, None]
    return rows[..., :, i0] * (1 - frac) + rows[..., :, i1] * frac


def synthesize(n_train: int, n_test: int, hw: int = 32, channels: int = 3,
               num_classes: int = 10, seed: int = 1234,
               noise: float = 64.0, name: str = "synthetic") -> tuple[Dataset, Dataset]:
    """Deterministic image classification data with CIFAR-like statistics.

    Each class gets a smooth template (a 4x4 random grid bilinearly
    upsampled and stretched over [16, 240]); examples are the template
    plus iid Gaussian pixel noise, rounded to integers in [0, 255].
    Class labels are balanced.
    """
    if n_train < 1 or n_test < 1:
        raise DataError("need at least one example per split")
    rng = np.random.default_rng(seed)
    coarse = rng.standard_normal((num_classes, channels, 4, 4))
    fields = _bilinear_upsample(coarse, hw)
    span = np.abs(fields).max()
    templates = 128.0 + 112.0 * fields / span

    def _split(n: int, split: str) -> Dataset:
        labels = np.arange(n, dtype=np.int64) % num_classes
        labels = labels[rng.permutation(n)]
        imgs = templates[labels] + rng.normal(0.0, noise, (n, channels, hw, hw))
        imgs = np.rint(np.clip(imgs, 0.0, 255.0)).astype(np.float32)
        return Dataset(name, split, imgs, labels, num_classes)

    return _split(n_train, "train"), _split(n_test, "test")


def balanced_subset(ds: Dataset, n: int) -> Dataset:
    """First n examples taken class-balanced, in original order."""
    if n <= 0 or n > len(ds):
        raise DataError(f"subset size {n} out of range for {len(ds)} examples")
    per, rem = divmod(n, ds.num_classes)
    take = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        want = per + (1 if c < rem else 0)
        if idx.size < want:
            raise DataError(f"class {c} has only {idx.size} examples, need {want}")
        take[idx[:want]] = True
    return Dataset(ds.name, ds.split, ds.images[take], ds.labels[take],
                   ds.num_classes)


@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    random_crop: bool = True
    hflip: bool = True
    standardize: str = "per_image"  # per_image | global | none

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if self.standardize not in ("per_image", "global", "none"):
            raise ValueError(f"unknown standardize mode {self.standardize!r}")


def _crop_flip(img: np.ndarray, pad: int, oi: int, oj: int, flip: bool) -> np.ndarray:
    c, h, w = img.shape
    if pad:
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
        padded[:, pad:pad + h, pad:pad + w] = img
        img = padded[:, oi:oi + h, oj:oj + w]
    if flip:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def standardize_per_image(x: np.ndarray) -> np.ndarray:
    """Per example over all channels and pixels: (x - mean) / (std + 1e-8)."""
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1).reshape(-1, 1, 1, 1)
    std = flat.std(axis=1).reshape(-1, 1, 1, 1)
    return (x - mean) / (std + 1e-8)


def _standardize_global(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    c = x.shape[1]
    return (x - mean.reshape(1, c, 1, 1)) / (std.reshape(1, c, 1, 1) + 1e-8)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Train-time transform of one (C, H, W) image.

    Draw order is fixed (crop row offset, crop column offset, flip coin)
    so a seeded generator replays the same sequence. Standardization, if
    per-image, happens after the geometric steps.
    """
    out = image.astype(np.float32)
    if cfg.random_crop and cfg.pad:
        oi = int(rng.integers(0, 2 * cfg.pad + 1))
        oj = int(rng.integers(0, 2 * cfg.pad + 1))
    else:
        oi = oj = 0
    flip = bool(cfg.hflip and rng.random() < 0.5)
    if cfg.random_crop and cfg.pad:
        out = _crop_flip(out, cfg.pad, oi, oj, flip)
    elif flip:
        out = np.ascontiguousarray(out[:, :, ::-1])
    if cfg.standardize == "per_image":
        out = standardize_per_image(out[None])[0]
    return out


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int, epoch: int,
            for_training: bool | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Raw (unaugmented, unstandardized) batches of one epoch.

    Training mode shuffles with a generator keyed by (shuffle_seed, epoch)
    and drops the ragged tail; eval mode keeps the original order and the
    tail. Defaults to the dataset's split.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if for_training is None:
        for_training = dataset.split == "train"
    n = len(dataset)
    if for_training:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
        limit = (n // batch_size) * batch_size
    else:
        order = np.arange(n)
        limit = n
    for lo in range(0, limit, batch_size):
        idx = order[lo:lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


_DONE = object()


class Prefetcher:
    """Wrap an iterator so a daemon thread stays ``capacity`` items ahead.

    Exceptions raised by the producer surface in the consumer.
    """

    def __init__(self, it, capacity: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._thread = threading.Thread(target=self._fill, args=(iter(it),), daemon=True)
        self._thread.start()

    def _fill(self, it) -> None:
        try:
            for item in it:
                self._q.put(item)
            self._q.put(_DONE)
        except BaseException as e:  # propagate, including KeyboardInterrupt
            self._q.put(e)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._q.get()
        if item is _DONE:
            raise StopIteration
        if isinstance(item, BaseException):
            raise item
        return item


@dataclass
class DataFeed:
    """Everything the train loop needs to draw deterministic batches.

    Augmentation parameters are drawn per (seed, epoch) as arrays indexed
    by example, and the epoch order by the same key, so the content of
    batch t is a pure function of (feed configuration, t).
    """
    train: Dataset
    test: Dataset
    batch_size: int = 100
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    prefetch: bool = False
    prefetch_capacity: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self.train) < self.batch_size:
            raise DataError(f"train split ({len(self.train)}) smaller than one "
                            f"batch ({self.batch_size})")
        if self.augment.standardize == "global":
            flat = self.train.images.reshape(len(self.train), self.train.channels, -1)
            self._gmean = flat.mean(axis=(0, 2))
            self._gstd = flat.std(axis=(0, 2))
        else:
            self._gmean = self._gstd = None

    @property
    def steps_per_epoch(self) -> int:
        return len(self.train) // self.batch_size

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        if self.augment.standardize == "per_image":
            return standardize_per_image(x)
        if self.augment.standardize == "global":
            return _standardize_global(x, self._gmean, self._gstd)
        return x

    def _epoch_setup(self, epoch: int):
        n = len(self.train)
        cfg = self.augment
        order = np.random.default_rng([self.seed, epoch, 0]).permutation(n)
        rng = np.random.default_rng([self.seed, epoch, 1])
        if cfg.random_crop and cfg.pad:
            offs = rng.integers(0, 2 * cfg.pad + 1, size=(n, 2))
        else:
            offs = np.zeros((n, 2), dtype=np.int64)
        if cfg.hflip:
            flips = rng.random(n) < 0.5
        else:
            flips = np.zeros(n, dtype=bool)
        return order, offs, flips

    def _train_batches(self, total_steps: int):
        cfg = self.augment
        spe = self.steps_per_epoch
        order = offs = flips = None
        cached_epoch = -1
        for step in range(total_steps):
            epoch, slot = divmod(step, spe)
            if epoch != cached_epoch:
                order, offs, flips = self._epoch_setup(epoch)
                cached_epoch = epoch
            idx = order[slot * self.batch_size:(slot + 1) * self.batch_size]
            if cfg.random_crop and cfg.pad:
                x = np.stack([
                    _crop_flip(self.train.images[e], cfg.pad,
                               int(offs[e, 0]), int(offs[e, 1]), bool(flips[e]))
                    for e in idx])
            elif cfg.hflip:
                x = np.stack([
                    np.ascontiguousarray(self.train.images[e][:, :, ::-1])
                    if flips[e] else self.train.images[e] for e in idx])
            else:
                x = self.train.images[idx]
            yield step, epoch, self._standardize(x.astype(np.float32)), self.train.labels[idx]

    def train_stream(self, total_steps: int):
        """Iterator of (step, epoch, x, y), optionally prefetched."""
        it = self._train_batches(total_steps)
        if self.prefetch:
            return Prefetcher(it, self.prefetch_capacity)
        return it

    def eval_batches(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Standardized, unaugmented test batches (reusable list)."""
        return [(self._standardize(x.astype(np.float32)), y)
                for x, y in batches(self.test, self.batch_size, 0, 0,
                                    for_training=False)]
