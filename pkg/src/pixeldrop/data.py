"""Dataset loading and generation.

Two sources: the CIFAR-10 binary batch format, and a procedurally generated
set of colored geometric signs used as a small stand-in benchmark. All pixels
live in [-1, 1] per channel (byte b maps to b/127.5 - 1) in [3, side, side]
channel-first layout, and every record carries a stable integer id so splits
and replays stay deterministic.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .rng import rng_for

CIFAR10_SIDE = 32
CIFAR10_CLASSES = 10
_CIFAR_RECORD_BYTES = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE
_CIFAR_VAL_TAIL = 5000

# Fill colors (RGB in [-1,1]) and the shape/color factorization of classes.
_SIGN_COLORS = np.array([
    [0.9, -0.6, -0.6],   # red
    [-0.6, 0.9, -0.6],   # green
    [-0.6, -0.6, 0.9],   # blue
    [0.9, 0.9, -0.6],    # yellow
], dtype=np.float64)
_SIGN_SHAPES = ("disk", "triangle", "square", "ring")
MAX_SIGN_CLASSES = len(_SIGN_SHAPES) * len(_SIGN_COLORS)


@dataclass
class ImageRecord:
    """One image: [3, side, side] float32 pixels in [-1,1], label, stable id."""

    pixels: np.ndarray
    label: int
    id: int


@dataclass
class DatasetSplit:
    """Train/validation/test record lists plus the class count and image side."""

    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    num_classes: int = 0
    side: int = 0

    def all_records(self):
        return self.train + self.validation + self.test


def normalize_bytes(raw: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1] with exact endpoints."""
    return (raw.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize(pixels: np.ndarray) -> np.ndarray:
    """float in [-1, 1] -> uint8, the inverse of normalize_bytes on bytes."""
    v = (np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def records_to_arrays(records):
    """Stack records into (pixels [N,3,H,W] float32, labels [N] int64, ids [N])."""
    if not records:
        raise ValueError("no records to stack")
    x = np.stack([r.pixels for r in records]).astype(np.float32, copy=False)
    y = np.array([r.label for r in records], dtype=np.int64)
    ids = np.array([r.id for r in records], dtype=np.int64)
    return x, y, ids


# -- CIFAR-10 binary batches -------------------------------------------------

def _read_cifar_file(path, first_id):
    size = os.path.getsize(path)
    if size % _CIFAR_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {size} is not a multiple of {_CIFAR_RECORD_BYTES}-byte records"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, _CIFAR_RECORD_BYTES)
    labels = raw[:, 0]
    if labels.size and labels.max() >= CIFAR10_CLASSES:
        raise ValueError(f"{path}: label byte {labels.max()} out of range for CIFAR-10")
    pixels = normalize_bytes(
        raw[:, 1:].reshape(-1, 3, CIFAR10_SIDE, CIFAR10_SIDE)
    )
    return [
        ImageRecord(pixels=pixels[i], label=int(labels[i]), id=first_id + i)
        for i in range(raw.shape[0])
    ]


def load_cifar10(dir_path) -> DatasetSplit:
    """Load the binary CIFAR-10 batches from a directory.

    Training records come from data_batch_1..5 in order; the last 5,000 of
    them form the validation set. test_batch supplies the test set. Ids are
    positions in that fixed order.
    """
    train = []
    for i in range(1, 6):
        path = os.path.join(dir_path, f"data_batch_{i}.bin")
        train.extend(_read_cifar_file(path, first_id=len(train)))
    if len(train) < 2:
        raise ValueError(f"{dir_path}: too few training records ({len(train)})")
    # 5,000 on the full 50,000-record set; a tenth on truncated copies.
    tail = min(_CIFAR_VAL_TAIL, max(1, len(train) // 10))
    test = _read_cifar_file(os.path.join(dir_path, "test_batch.bin"), first_id=len(train))
    return DatasetSplit(
        train=train[:-tail],
        validation=train[-tail:],
        test=test,
        num_classes=CIFAR10_CLASSES,
        side=CIFAR10_SIDE,
    )


# -- synthetic sign shapes ----------------------------------------------------

def _draw_sign(record_id, label, side, seed):
    rng = rng_for(seed, "synth", record_id)
    colors = len(_SIGN_COLORS)
    shape = _SIGN_SHAPES[label // colors]
    color = _SIGN_COLORS[label % colors].copy()
    color += rng.uniform(-0.08, 0.08, size=3)

    background = rng.uniform(-0.95, -0.6)
    img = np.full((3, side, side), background, dtype=np.float64)

    cy = side / 2 + rng.uniform(-0.12, 0.12) * side
    cx = side / 2 + rng.uniform(-0.12, 0.12) * side
    radius = side * rng.uniform(0.24, 0.34)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    yy += 0.5
    xx += 0.5
    if shape == "disk":
        fill = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    elif shape == "square":
        fill = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= radius * 0.9
    elif shape == "triangle":
        top = cy - radius
        fill = (yy >= top) & (yy <= cy + radius) & (np.abs(xx - cx) <= (yy - top) / 2)
    else:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        fill = (d2 <= radius ** 2) & (d2 >= (0.55 * radius) ** 2)

    img[:, fill] = color[:, None]
    img += rng.normal(0.0, 0.05, size=img.shape)
    np.clip(img, -1.0, 1.0, out=img)
    return img.astype(np.float32)


def synth_signs(n_per_class, num_classes, side, seed,
                val_per_class=None, test_per_class=None) -> DatasetSplit:
    """Generate a balanced dataset of colored geometric signs.

    Classes factor as shape x color (up to 4x4); every record is a pure
    function of (seed, record id), so two calls with the same arguments
    produce identical datasets. ``n_per_class`` sizes the training set;
    validation and test default to a fifth of it each.
    """
    if num_classes > MAX_SIGN_CLASSES:
        raise ValueError(f"at most {MAX_SIGN_CLASSES} sign classes, got {num_classes}")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if side < 16:
        raise ValueError(f"side must be at least 16, got {side}")
    if val_per_class is None:
        val_per_class = max(1, round(0.2 * n_per_class))
    if test_per_class is None:
        test_per_class = max(1, round(0.2 * n_per_class))

    counts = (n_per_class, val_per_class, test_per_class)
    splits = ([], [], [])
    next_id = 0
    for part, count in enumerate(counts):
        for _ in range(count):
            for label in range(num_classes):
                rec = ImageRecord(
                    pixels=_draw_sign(next_id, label, side, seed),
                    label=label,
                    id=next_id,
                )
                splits[part].append(rec)
                next_id += 1
    return DatasetSplit(
        train=splits[0], validation=splits[1], test=splits[2],
        num_classes=num_classes, side=side,
    )


def split_and_shuffle(records, fractions, seed) -> DatasetSplit:
    """Partition records into train/validation/test by seeded permutation."""
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(fractions) != 3:
        raise ValueError(f"need (train, validation, test) fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    order = rng_for(seed, "split").permutation(len(records))
    shuffled = [records[i] for i in order]
    n = len(records)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    num_classes = max(r.label for r in records) + 1
    side = records[0].pixels.shape[-1]
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        num_classes=num_classes,
        side=side,
    )


# -- image file writers --------------------------------------------------------

def write_ppm(path, pixels):
    """Write [3,H,W] pixels in [-1,1] as a binary P6 PPM file."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3,H,W], got {arr.shape}")
    h, w = arr.shape[1:]
    body = denormalize(arr).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body)


def write_pgm(path, values):
    """Write a [H,W] array as a binary P5 PGM file, scaled to its own range."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm expects [H,W], got {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    body = np.clip(np.rint((arr - lo) * scale), 0, 255).astype(np.uint8).tobytes()
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body)


def export_dataset_ppm(dir_path, records):
    """Write every record as <id>.ppm plus an index.txt of "id label" lines."""
    os.makedirs(dir_path, exist_ok=True)
    lines = []
    for rec in records:
        write_ppm(os.path.join(dir_path, f"{rec.id}.ppm"), rec.pixels)
        lines.append(f"{rec.id} {rec.label}")
    with open(os.path.join(dir_path, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
