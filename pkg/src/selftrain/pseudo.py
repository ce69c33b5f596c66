"""Teacher pseudo labels: generation, hardening, confidence filtering, class balancing."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import augment_batch
from .data import DatasetStore
from .nn.functional import softmax
from .nn.model import forward


@dataclass(frozen=True, eq=False)
class PseudoPool:
    """Images with teacher distributions.

    ``source_index`` points back into the unlabeled store each image came
    from, so duplicates made by balancing are traceable.
    ``empty_classes`` lists classes that balancing could not fill.
    """

    images: np.ndarray
    soft: np.ndarray
    source_index: np.ndarray
    num_classes: int
    empty_classes: tuple = field(default=())

    def __post_init__(self):
        soft = np.asarray(self.soft, dtype=np.float64)
        if soft.ndim != 2 or soft.shape[1] != self.num_classes or len(soft) != len(self.images):
            raise ValueError("soft must be N x K, one row per image")

    def __len__(self):
        return len(self.soft)

    @property
    def hard(self):
        return np.argmax(self.soft, axis=1)

    @property
    def confidence(self):
        return self.soft.max(axis=1)

    @property
    def per_class_counts(self):
        return np.bincount(self.hard, minlength=self.num_classes)

    @property
    def distinct_count(self):
        return int(np.unique(self.source_index).size)

    def subset(self, index, empty_classes=()):
        index = np.asarray(index, dtype=np.int64)
        return PseudoPool(self.images[index], self.soft[index], self.source_index[index], self.num_classes, tuple(empty_classes))

    def as_store(self, label_mode="soft"):
        """Training view: targets are the soft rows or their one-hot argmax."""
        if label_mode not in ("soft", "hard"):
            raise ValueError(f"label_mode must be 'soft' or 'hard', got {label_mode!r}")
        targets = self.soft if label_mode == "soft" else harden(self.soft)
        return DatasetStore(self.images, self.num_classes, "pseudo", targets=targets, origin=self.source_index)


def generate_pseudo_labels(teacher, unlabeled, batch_size=1000, noise=None, rng=None):
    """Label every unlabeled image with the teacher's softmax output.

    By default the teacher runs clean: inference mode, no augmentation.
    Passing ``noise`` and ``rng`` instead runs it noised (train-mode model
    noise plus input augmentation); that exists only for the ablation that
    compares against a noised teacher.
    """
    images = np.asarray(unlabeled.images)
    rows = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        if noise is None:
            logits, _ = forward(teacher, chunk, mode="infer")
        else:
            logits, _ = forward(teacher, augment_batch(chunk, noise, rng), noise, "train", rng)
        rows.append(softmax(logits))
    soft = np.concatenate(rows) if rows else np.zeros((0, teacher.num_classes))
    return PseudoPool(images, soft, np.arange(len(images)), teacher.num_classes)


def harden(soft):
    """One-hot at the argmax, ties going to the lowest index."""
    soft = np.asarray(soft, dtype=np.float64)
    out = np.zeros_like(soft)
    idx = np.argmax(soft, axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


def filter_confidence(pool, tau=0.3):
    """Keep examples whose confidence is strictly greater than ``tau``, in order."""
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    keep = np.flatnonzero(pool.confidence > tau)
    if keep.size == 0:
        warnings.warn(f"no pseudo label has confidence above {tau}", stacklevel=2)
    return pool.subset(keep)


def balance(pool, cap, rng):
    """Give every non-empty class exactly ``cap`` examples.

    Over-full classes keep their ``cap`` most confident members (ties by
    original position). Short classes are topped up with uniformly random
    duplicates of their own members. Classes with no members stay empty and
    are recorded in ``empty_classes``. Output is grouped by class.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    hard, conf = pool.hard, pool.confidence
    chosen, empty = [], []
    for k in range(pool.num_classes):
        members = np.flatnonzero(hard == k)
        if members.size == 0:
            empty.append(k)
            continue
        if members.size >= cap:
            # stable sort on -confidence keeps original order among ties
            order = np.argsort(-conf[members], kind="stable")
            chosen.append(members[order[:cap]])
        else:
            extra = rng.choice(members, size=cap - members.size, replace=True)
            chosen.append(np.concatenate([members, extra]))
    if empty:
        warnings.warn(f"classes without pseudo labels after filtering: {empty}", stacklevel=2)
    index = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return pool.subset(index, empty)


def bucket_by_confidence(pool, intervals):
    """Split by confidence into half-open ``[lo, hi)`` buckets; a bucket ending at 1.0 is closed."""
    intervals = [(float(lo), float(hi)) for lo, hi in intervals]
    ordered = sorted(intervals)
    for (_, a_hi), (b_lo, _) in zip(ordered, ordered[1:]):
        if b_lo < a_hi:
            raise ValueError("confidence intervals overlap")
    conf = pool.confidence
    out = []
    for lo, hi in intervals:
        mask = (conf >= lo) & ((conf < hi) | ((hi >= 1.0) & (conf <= hi)))
        out.append(pool.subset(np.flatnonzero(mask)))
    return out


DECILES = tuple((i / 10, (i + 1) / 10) for i in range(10))


def pool_digest(pool):
    h = hashlib.sha256()
    for arr in (pool.images, pool.soft, pool.source_index):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_pool(directory, pool, **manifest):
    """Write ``pool.json`` (manifest) and ``pool.bin`` (little-endian blocks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.ascontiguousarray(pool.images, dtype="<f8")
    blob = (
        images.tobytes()
        + np.ascontiguousarray(pool.soft, dtype="<f8").tobytes()
        + np.ascontiguousarray(pool.confidence, dtype="<f8").tobytes()
        + np.ascontiguousarray(pool.source_index, dtype="<i8").tobytes()
    )
    (directory / "pool.bin").write_bytes(blob)
    meta = dict(manifest)
    meta.update(
        count=len(pool),
        num_classes=pool.num_classes,
        image_shape=list(images.shape[1:]),
        empty_classes=list(pool.empty_classes),
        layout=["images<f8", "soft<f8", "confidence<f8", "source_index<i8"],
        sha256=hashlib.sha256(blob).hexdigest(),
    )
    (directory / "pool.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_pool(directory):
    directory = Path(directory)
    meta = json.loads((directory / "pool.json").read_text())
    blob = (directory / "pool.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise ValueError(f"{directory / 'pool.bin'} does not match the digest in pool.json")
    n, K = meta["count"], meta["num_classes"]
    shape = tuple(meta["image_shape"])
    n_img = n * int(np.prod(shape))
    off = 0
    images = np.frombuffer(blob, "<f8", n_img, off).reshape((n,) + shape)
    off += 8 * n_img
    soft = np.frombuffer(blob, "<f8", n * K, off).reshape(n, K)
    off += 8 * n * K + 8 * n  # confidence is derived, skip
    source = np.frombuffer(blob, "<i8", n, off)
    pool = PseudoPool(images.astype(np.float64), soft.astype(np.float64), source.astype(np.int64), K, tuple(meta["empty_classes"]))
    return pool, meta
