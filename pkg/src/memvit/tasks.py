"""Deterministic synthetic classification tasks and dataset I/O.

Each task draws on a family of fixed sinusoid carriers (integer frequency
pairs seeded by ``family_seed``); a class is an energy signature over
(channel, carrier) pairs. Every sample re-randomizes all phases, so class
identity lives in band energies, never in pixel templates: a classifier
has to develop frequency-selective features, which is what makes features
transfer between tasks of the same family. Pixels are quantized to the
8-bit grid so a dataset round-trips exactly through the binary format.

The overlap knob interpolates every class signature toward the family
mean: at 1.0 all classes are identically distributed and nothing can beat
chance; at 0.0 with zero noise a nearest-signature oracle on carrier-bin
spectra is perfect.

Two specs that share every knob (including ``family_seed``) but differ in
``seed`` form a transfer pair: the same texture family under a different
labeling rule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

MAGIC = b"MTDS"
FORMAT_VERSION = 1
TEST_FRACTION = 0.20
HOLDOUT_FRACTION = 0.05  # of the post-test training pool
_SPLIT_SEED = 0x4D544453  # fixed so splits survive a file round-trip

_CARRIERS = 6
_CHANNEL_BUDGET = (0.22, 0.42)  # per-channel amplitude sum, drawn per class
_SCALE_JITTER = (0.9, 1.1)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seed: int
    num_classes: int
    image_size: int = 32
    channels: int = 3
    samples_per_class: int = 64
    freq_lo: int = 2
    freq_hi: int = 7
    noise_std: float = 0.05
    class_overlap: float = 0.0
    family_seed: int = 7919

    def __post_init__(self):
        if not (0.0 <= self.class_overlap <= 1.0):
            raise ValueError("class_overlap must lie in [0, 1]")
        if self.freq_lo < 1 or self.freq_hi < self.freq_lo:
            raise ValueError("need 1 <= freq_lo <= freq_hi")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")

    def transfer_partner(self, seed: int, num_classes: int | None = None) -> "SyntheticTaskSpec":
        """Same texture family, different labeling rule."""
        return replace(self, seed=seed,
                       num_classes=num_classes if num_classes is not None else self.num_classes)


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    splits: dict[str, np.ndarray]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]

    @property
    def n(self) -> int:
        return len(self.labels)

    def equals(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes
                and self.images.tobytes() == other.images.tobytes()
                and self.labels.tobytes() == other.labels.tobytes()
                and all(np.array_equal(self.splits[k], other.splits[k])
                        for k in ("train", "holdout", "test")))


def family_carriers(spec: SyntheticTaskSpec) -> np.ndarray:
    """Integer (fx, fy) frequency pairs shared by every task of a family."""
    rng = np.random.default_rng(spec.family_seed)
    pairs = []
    seen = set()
    while len(pairs) < _CARRIERS:
        fx = int(rng.integers(spec.freq_lo, spec.freq_hi + 1))
        fy = int(rng.integers(-spec.freq_hi, spec.freq_hi + 1))
        if (fx, fy) in seen or (fx == 0 and fy == 0):
            continue
        seen.add((fx, fy))
        pairs.append((fx, fy))
    return np.array(pairs, dtype=np.int64)


def class_signatures(spec: SyntheticTaskSpec) -> np.ndarray:
    """Per-class carrier amplitudes, shape (C, channels, carriers).

    Rows are normalized to a per-class, per-channel budget, then blended
    toward the mean signature by the overlap factor.
    """
    rng = np.random.default_rng(spec.seed)
    amps = rng.uniform(0.15, 1.0, (spec.num_classes, spec.channels, _CARRIERS))
    budgets = rng.uniform(*_CHANNEL_BUDGET, (spec.num_classes, spec.channels))
    amps *= (budgets / amps.sum(axis=2))[..., None]
    mean = amps.mean(axis=0, keepdims=True)
    return (1.0 - spec.class_overlap) * amps + spec.class_overlap * mean


def generate(spec: SyntheticTaskSpec) -> Dataset:
    """Expand a spec into a dataset; same spec always yields identical bytes."""
    rng = np.random.default_rng([spec.seed, 0x3A])
    carriers = family_carriers(spec)
    sigs = class_signatures(spec)
    s = spec.image_size
    grid = np.arange(s)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    # carrier basis: (carriers, s, s)
    basis = 2.0 * np.pi * (carriers[:, 0, None, None] * xx
                           + carriers[:, 1, None, None] * yy) / s
    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n, s, s, spec.channels), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            phases = rng.uniform(0.0, 2.0 * np.pi, (spec.channels, _CARRIERS))
            scale = rng.uniform(*_SCALE_JITTER)
            waves = np.sin(basis[None, :, :, :] + phases[:, :, None, None])
            img = 0.5 + scale * np.einsum("kf,kfyx->yxk", sigs[c], waves)
            if spec.noise_std > 0:
                img = img + spec.noise_std * rng.standard_normal(img.shape)
            img = np.clip(img, 0.0, 1.0)
            images[i] = (np.round(img * 255.0) / 255.0).astype(np.float32)
            labels[i] = c
            i += 1
    return Dataset(images=images, labels=labels, num_classes=spec.num_classes,
                   splits=stratified_splits(labels))


def stratified_splits(labels: np.ndarray) -> dict[str, np.ndarray]:
    """Canonical per-class test/holdout/train split.

    Seeded by a fixed constant (not the task seed) so a dataset written to
    disk and read back gets byte-identical splits. The holdout is 5% of
    the post-test training pool.
    """
    rng = np.random.default_rng(_SPLIT_SEED)
    empty = np.zeros(0, dtype=np.int64)
    train, holdout, test = [empty], [empty], [empty]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(len(idx) * TEST_FRACTION)
        pool = idx[n_test:]
        n_hold = int(len(pool) * HOLDOUT_FRACTION)
        test.append(idx[:n_test])
        holdout.append(pool[:n_hold])
        train.append(pool[n_hold:])
    return {
        "train": np.sort(np.concatenate(train)),
        "holdout": np.sort(np.concatenate(holdout)),
        "test": np.sort(np.concatenate(test)),
    }


# ---------------------------------------------------------------------------
# Binary dataset format
# ---------------------------------------------------------------------------
# little-endian: magic "MTDS", version u32, n u32, h u16, w u16, c u16,
# num_classes u16, then n records of [label u16][h*w*c pixel bytes,
# row-major, channel-last, 0..255]. Pixels are value/255 in memory.

_HEADER = struct.Struct("<4sIIHHHH")


class DatasetFormatError(ValueError):
    pass


def save_binary(dataset: Dataset, path) -> None:
    n = dataset.n
    h, w, c = dataset.images.shape[1:]
    if dataset.num_classes > 0xFFFF or max(h, w, c) > 0xFFFF:
        raise DatasetFormatError("dimensions exceed the u16 header fields")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, c, dataset.num_classes))
        for i in range(n):
            f.write(struct.pack("<H", int(dataset.labels[i])))
            f.write(pixels[i].tobytes())


def load_binary(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(
            f"truncated header: file ends at byte {len(blob)}, need {_HEADER.size}")
    magic, version, n, h, w, c, num_classes = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    rec = 2 + h * w * c
    expected = _HEADER.size + n * rec
    if len(blob) != expected:
        raise DatasetFormatError(
            f"truncated or oversized payload: file ends at byte {len(blob)}, "
            f"expected {expected}")
    images = np.empty((n, h, w, c), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        (label,) = struct.unpack_from("<H", blob, off)
        if label >= num_classes:
            raise DatasetFormatError(
                f"record {i} at byte {off}: label {label} >= {num_classes} classes")
        labels[i] = label
        pix = np.frombuffer(blob, dtype=np.uint8, count=h * w * c, offset=off + 2)
        images[i] = pix.reshape(h, w, c).astype(np.float32) / 255.0
        off += rec
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   splits=stratified_splits(labels))


# ---------------------------------------------------------------------------
# Training-time augmentation
# ---------------------------------------------------------------------------


def augment(batch: np.ndarray, flip: bool, crop_pad: int,
            rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flips (p=0.5) and pad-then-random-crop.

    Draw order is fixed (all flips, then all crop offsets) so a seeded rng
    reproduces the batch exactly.
    """
    if crop_pad < 0:
        raise ValueError("crop_pad must be non-negative")
    out = batch
    if flip:
        out = out.copy()
        do = rng.random(len(out)) < 0.5
        out[do] = out[do, :, ::-1, :]
    if crop_pad > 0:
        b, h, w, c = out.shape
        padded = np.zeros((b, h + 2 * crop_pad, w + 2 * crop_pad, c), dtype=out.dtype)
        padded[:, crop_pad:crop_pad + h, crop_pad:crop_pad + w, :] = out
        oy = rng.integers(0, 2 * crop_pad + 1, size=b)
        ox = rng.integers(0, 2 * crop_pad + 1, size=b)
        out = np.stack([padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w, :]
                        for i in range(b)])
    return out
