"""Datasets: IDX I/O, the synthetic benchmark, splitting, and the mixed batch stream."""
from __future__ import annotations

import gzip
import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError, IdxParseError
from .nn.functional import one_hot
from .rng import derive_rng

IDX_IMAGES = 0x00000803
IDX_IMAGES_RGB = 0x00000804
IDX_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class DatasetStore:
    """Immutable image collection.

    ``kind`` is ``labeled`` (``labels`` set), ``unlabeled`` or ``pseudo``
    (``targets`` holds one distribution per image). ``origin`` optionally
    records the generating class of synthetic images (ids >= K are
    out-of-domain phantom classes); it is metadata, never a training signal.
    """

    images: np.ndarray
    num_classes: int
    kind: str = "labeled"
    labels: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", _frozen(images))
        if self.kind not in ("labeled", "unlabeled", "pseudo"):
            raise ValueError(f"unknown store kind {self.kind!r}")
        if self.kind == "labeled":
            if self.labels is None:
                raise ValueError("labeled store needs labels")
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise ValueError("one label per image required")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
            object.__setattr__(self, "labels", _frozen(labels))
        if self.kind == "pseudo":
            targets = np.asarray(self.targets, dtype=np.float64)
            if targets.shape != (len(images), self.num_classes):
                raise ValueError("pseudo store needs an N x K targets array")
            object.__setattr__(self, "targets", _frozen(targets))
        if self.origin is not None:
            object.__setattr__(self, "origin", _frozen(np.asarray(self.origin, dtype=np.int64)))

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def target_matrix(self):
        """Per-example training targets: one-hot labels or pseudo distributions."""
        if self.kind == "labeled":
            return one_hot(self.labels, self.num_classes)
        if self.kind == "pseudo":
            return np.asarray(self.targets)
        raise ValueError("unlabeled store has no targets")

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return DatasetStore(
            self.images[index],
            self.num_classes,
            self.kind,
            None if self.labels is None else self.labels[index],
            None if self.targets is None else self.targets[index],
            None if self.origin is None else self.origin[index],
        )

    def as_unlabeled(self):
        return DatasetStore(self.images, self.num_classes, "unlabeled", origin=self.origin)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


# -- IDX ------------------------------------------------------------------------


def _read_bytes(path):
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _parse_idx(data, expected_magic):
    if len(data) < 4:
        raise IdxParseError("file too short for IDX magic", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in expected_magic:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected " + " or ".join(f"0x{m:08x}" for m in expected_magic), 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims)) if dims else 0
    if len(data) < header_end + count:
        raise IdxParseError(f"truncated payload: need {count} bytes after header, have {len(data) - header_end}", len(data))
    if len(data) > header_end + count:
        raise IdxParseError("trailing bytes after payload", header_end + count)
    return dims, np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes=None):
    """Load an IDX image file (and optional label file) into a store.

    Pixel bytes are scaled by 1/255. Without ``labels_path`` the result is
    an unlabeled store. ``num_classes`` defaults to ``max(label) + 1``
    (10 when unlabeled).
    """
    dims, raw = _parse_idx(_read_bytes(images_path), (IDX_IMAGES, IDX_IMAGES_RGB))
    images = raw.astype(np.float64) / 255.0
    if images.ndim == 3:
        images = images[..., None]
    if labels_path is None:
        return DatasetStore(images, num_classes or 10, "unlabeled")
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), (IDX_LABELS,))
    if n_labels != dims[0]:
        raise IdxParseError(f"label count {n_labels} != image count {dims[0]}", 4)
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 10
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise IdxParseError(f"label {labels[bad[0]]} at index {bad[0]} is outside [0, {k})", 8 + int(bad[0]))
    return DatasetStore(images, k, "labeled", labels)


def write_idx(store, images_path, labels_path=None):
    """Write ``store`` as IDX (pixels rounded to bytes)."""
    pixels = np.rint(np.asarray(store.images) * 255.0).astype(np.uint8)
    n, h, w, c = pixels.shape
    if c == 1:
        head = struct.pack(">IIII", IDX_IMAGES, n, h, w)
        body = pixels[..., 0].tobytes()
    else:
        head = struct.pack(">IIIII", IDX_IMAGES_RGB, n, h, w, c)
        body = pixels.tobytes()
    Path(images_path).write_bytes(head + body)
    if labels_path is not None:
        if store.labels is None:
            raise ValueError("store has no labels to write")
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, n) + store.labels.astype(np.uint8).tobytes())


# -- synthetic benchmark --------------------------------------------------------


def make_prototypes(count, side, channels, seed):
    """``count`` smooth random images in [0.1, 0.9] sharing a common component."""
    rng = derive_rng(seed, "prototypes")
    sigma = side / 9.0
    common = ndimage.gaussian_filter(rng.normal(size=(side, side, channels)), (sigma, sigma, 0), mode="wrap")
    protos = []
    for _ in range(count):
        own = ndimage.gaussian_filter(rng.normal(size=(side, side, channels)), (sigma, sigma, 0), mode="wrap")
        mix = 0.5 * common / common.std() + own / own.std()
        lo, hi = mix.min(), mix.max()
        protos.append(0.1 + 0.8 * (mix - lo) / (hi - lo))
    return np.stack(protos)


def _render(prototypes, classes, noise_level, max_shift, max_rotate, jitter, rng):
    """Prototype copies with a circular shift, a rotation, brightness/contrast jitter and pixel noise."""
    n = len(classes)
    side = prototypes.shape[1]
    imgs = prototypes[classes].copy()
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        imgs[i] = np.roll(imgs[i], tuple(shifts[i]), axis=(0, 1))
    theta = np.radians(rng.uniform(-max_rotate, max_rotate, n))
    c, s = np.cos(theta), np.sin(theta)
    mid = (side - 1) / 2.0
    coeffs = np.stack([c, s, mid - c * mid - s * mid, -s, c, mid + s * mid - c * mid], axis=1)
    imgs = kernels.affine_warp(np.ascontiguousarray(imgs), coeffs, 0.5)
    mean = imgs.mean(axis=(1, 2, 3), keepdims=True)
    contrast = rng.uniform(1.0 - 2.0 * jitter, 1.0 + 2.0 * jitter, (n, 1, 1, 1))
    shift = rng.uniform(-jitter, jitter, (n, 1, 1, 1))
    imgs = mean + contrast * (imgs - mean) + shift
    imgs += noise_level * rng.normal(size=imgs.shape)
    return np.clip(imgs, 0.0, 1.0)


@dataclass(frozen=True)
class SynthManifest:
    seed: int
    prototype_seed: int
    num_classes: int
    per_class_labeled: int
    unlabeled_total: int
    in_domain_fraction: float
    test_total: int
    image_side: int
    noise_level: float
    max_shift: int
    max_rotate: float
    jitter: float
    channels: int

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def synth_generate(
    num_classes,
    per_class_labeled,
    unlabeled_total,
    in_domain_fraction,
    image_side,
    seed,
    test_total=2000,
    noise_level=0.4,
    max_shift=3,
    prototype_seed=None,
    channels=1,
    max_rotate=20.0,
    jitter=0.15,
):
    """Prototype-plus-noise benchmark; returns ``(labeled, unlabeled, test, manifest)``.

    Each class is a fixed smooth prototype. Examples are the prototype
    circularly shifted by up to ``max_shift`` pixels, rotated by up to
    ``max_rotate`` degrees, given a random brightness shift (up to
    ``jitter``) and contrast factor (within ``1 +- 2 * jitter``), plus
    Gaussian pixel noise. Out-of-domain unlabeled images come from ``num_classes`` extra
    phantom prototypes. The class prototypes depend only on
    ``prototype_seed`` (default ``seed``); everything else on ``seed``.
    """
    if min(num_classes, per_class_labeled, unlabeled_total, image_side, test_total) <= 0:
        raise ValueError("all counts must be positive")
    if not 0.0 <= in_domain_fraction <= 1.0:
        raise ValueError("in_domain_fraction must lie in [0, 1]")
    pseed = seed if prototype_seed is None else prototype_seed
    protos = make_prototypes(2 * num_classes, image_side, channels, pseed)
    K = num_classes

    rng = derive_rng(seed, "labeled")
    lab_cls = np.repeat(np.arange(K), per_class_labeled)
    rng.shuffle(lab_cls)
    look = (noise_level, max_shift, max_rotate, jitter)
    labeled = DatasetStore(_render(protos, lab_cls, *look, rng), K, "labeled", lab_cls, origin=lab_cls)

    rng = derive_rng(seed, "unlabeled")
    n_in = int(round(in_domain_fraction * unlabeled_total))
    origin = np.concatenate([rng.integers(0, K, n_in), rng.integers(K, 2 * K, unlabeled_total - n_in)])
    rng.shuffle(origin)
    unlabeled = DatasetStore(_render(protos, origin, *look, rng), K, "unlabeled", origin=origin)

    test = _holdout(protos, K, test_total, look, derive_rng(seed, "test"))

    manifest = SynthManifest(
        int(seed), int(pseed), K, per_class_labeled, unlabeled_total, float(in_domain_fraction),
        test_total, image_side, float(noise_level), max_shift, float(max_rotate), float(jitter), channels,
    )
    return labeled, unlabeled, test, manifest


def _holdout(protos, K, total, look, rng):
    cls = np.arange(total) % K
    rng.shuffle(cls)
    return DatasetStore(_render(protos, cls, *look, rng), K, "labeled", cls, origin=cls)


def synth_holdout(num_classes, total, image_side, seed, stream="validation", noise_level=0.4, max_shift=3,
                  prototype_seed=None, channels=1, max_rotate=20.0, jitter=0.15):
    """A class-balanced labeled set from the same distribution as :func:`synth_generate`'s test set.

    Drawn from its own RNG stream, so it shares no examples with the labeled,
    unlabeled or test sets built from the same seed.
    """
    if stream in ("labeled", "unlabeled", "test"):
        raise ValueError(f"stream {stream!r} is used by synth_generate")
    if min(num_classes, total, image_side) <= 0:
        raise ValueError("all counts must be positive")
    pseed = seed if prototype_seed is None else prototype_seed
    protos = make_prototypes(2 * num_classes, image_side, channels, pseed)
    look = (noise_level, max_shift, max_rotate, jitter)
    return _holdout(protos, num_classes, total, look, derive_rng(seed, stream))


# -- splitting ------------------------------------------------------------------


def split(store, fractions, seed):
    """Disjoint uniform random shards of sizes ``floor(f * n)``."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError("fractions must be non-negative and sum to at most 1")
    n = len(store)
    perm = derive_rng(seed, "split").permutation(n)
    shards, start = [], 0
    for i, f in enumerate(fractions):
        size = min(n - start, math.floor(f * n + 1e-9))
        if size == 0:
            warnings.warn(f"split shard {i} (fraction {f}) is empty", stacklevel=2)
        shards.append(store.subset(np.sort(perm[start : start + size])))
        start += size
    return shards


# -- mixed batches --------------------------------------------------------------


@dataclass
class MixedBatch:
    epoch: int
    step: int
    ratio: int
    labeled_index: np.ndarray
    labeled_images: np.ndarray
    labeled_targets: np.ndarray
    pseudo_index: np.ndarray
    pseudo_images: np.ndarray
    pseudo_targets: np.ndarray


class _Cycle:
    """Endless shuffled stream over ``range(n)``, reshuffled at each wrap."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(k - filled, self.n - self.pos)
            out[filled : filled + grab] = self.order[self.pos : self.pos + grab]
            filled += grab
            self.pos += grab
        return out


def steps_per_epoch(n, batch):
    return math.ceil(n / batch)


def batch_iterator(labeled, pseudo, labeled_batch, ratio, epochs, seed) -> Iterator[MixedBatch]:
    """Stream of labeled + pseudo batches.

    The labeled store is reshuffled every epoch and visited exactly once per
    epoch (the last batch may be short). Each batch carries ``ratio`` pseudo
    examples per labeled example, drawn from an independent stream that
    cycles with a reshuffle on every wrap.
    """
    if int(ratio) != ratio or ratio < 1:
        raise ConfigError("ratio must be an integer >= 1", "ratio")
    if labeled_batch < 1:
        raise ConfigError("labeled_batch must be >= 1", "labeled_batch")
    n, m = len(labeled), len(pseudo)
    if n == 0 or m == 0:
        raise ValueError("labeled and pseudo stores must be non-empty")
    if ratio * n / m > 1e6:
        raise ConfigError(f"ratio {ratio} cycles the {m}-example pseudo store over 1e6 times per epoch", "ratio")
    lab_targets = labeled.target_matrix()
    pse_targets = pseudo.target_matrix()
    order_rng = derive_rng(seed, "labeled-order")
    cycle = _Cycle(m, derive_rng(seed, "pseudo-order"))
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, labeled_batch):
            li = order[start : start + labeled_batch]
            pi = cycle.take(ratio * len(li))
            yield MixedBatch(
                epoch, step, ratio, li, labeled.images[li], lab_targets[li], pi, pseudo.images[pi], pse_targets[pi]
            )
            step += 1


def single_iterator(store, batch, epochs, seed, stream="order"):
    """Plain shuffled minibatches ``(epoch, step, index, images, targets)`` over one store."""
    targets = store.target_matrix()
    rng = derive_rng(seed, stream)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(store))
        for start in range(0, len(store), batch):
            idx = order[start : start + batch]
            yield epoch, step, idx, store.images[idx], targets[idx]
            step += 1
