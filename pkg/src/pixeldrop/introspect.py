"""Gradient-magnitude explanation maps and first-layer filter export.

The explanation map is the absolute input gradient of a chosen output
scalar (the predicted-class logit by default, optionally the loss at a
given label). Splitting it along a drop mask shows how much gradient mass
sits on dropped versus kept positions. Filter export renders every stem
convolution filter as a small PPM image and scores how concentrated its
weight is at the center tap.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import Mask
from .models import Checkpoint, Model


@dataclass
class ExplanationMap:
    """Absolute input gradient: per-channel, its channel sum, and the source."""

    values: np.ndarray        # [H,W], nonnegative channel-summed magnitudes
    per_channel: np.ndarray   # [3,H,W]
    source: str               # which scalar was differentiated


def explanation_map(model: Model, x, target="logit") -> ExplanationMap:
    """Absolute gradient of one output scalar with respect to one input image.

    ``target`` selects the scalar: "logit" differentiates the predicted-class
    logit; ("loss", y) differentiates the cross-entropy at label y.
    """
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"explanation_map expects one [3,H,W] image, got {arr.shape}")
    leaf = Tensor(arr[None].copy(), requires_grad=True)
    logits = model.forward(leaf, training=False)
    if target == "logit":
        pred = int(np.argmax(logits.data[0]))
        pick = np.zeros_like(logits.data)
        pick[0, pred] = 1.0
        scalar = ad.tsum(ad.mul(logits, Tensor(pick)))
        source = f"logit[{pred}]"
    elif isinstance(target, tuple) and len(target) == 2 and target[0] == "loss":
        y = int(target[1])
        scalar = ad.cross_entropy(logits, np.array([y], dtype=np.int64))
        source = f"loss[y={y}]"
    else:
        raise ValueError(f"target must be 'logit' or ('loss', y), got {target!r}")
    scalar.backward()
    per_channel = np.abs(leaf.grad[0])
    return ExplanationMap(values=per_channel.sum(axis=0),
                          per_channel=per_channel, source=source)


def mask_split(emap: ExplanationMap, mask: Mask):
    """(kept map, dropped map): E*M and E*(1-M) on the channel-summed map.

    Channel masks are reduced to one plane by the any-kept rule, so a
    position counts as kept when at least one of its channels was kept.
    """
    if mask.bits.shape != emap.per_channel.shape:
        raise ValueError(f"mask shape {mask.bits.shape} != map shape "
                         f"{emap.per_channel.shape}")
    kept_plane = mask.bits.max(axis=0)
    return emap.values * kept_plane, emap.values * (1.0 - kept_plane)


def dropped_mass_fraction(emap: ExplanationMap, mask: Mask) -> float:
    """Fraction of total map mass sitting on fully-dropped positions."""
    kept, dropped = mask_split(emap, mask)
    total = float(kept.sum() + dropped.sum())
    return float(dropped.sum()) / total if total > 0 else 0.0


def center_concentration(filt) -> float:
    """|center tap| l1 mass over total l1 mass of one [3,kh,kw] filter."""
    arr = np.abs(np.asarray(filt, dtype=np.float64))
    total = float(arr.sum())
    if total == 0.0:
        return 0.0
    kh, kw = arr.shape[1:]
    return float(arr[:, kh // 2, kw // 2].sum()) / total


def _filter_bytes(filt) -> np.ndarray:
    """Min-max normalize one [3,kh,kw] filter to [0,255] jointly over channels."""
    arr = np.asarray(filt, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = (arr - lo) / (hi - lo) * 255.0
    else:
        scaled = np.full_like(arr, 128.0)
    return np.rint(scaled).astype(np.uint8)


def export_filters(checkpoint: Checkpoint, out_dir):
    """Write every stem filter as filter_<i>.ppm plus a concentration CSV.

    Returns the list of (index, byte image [3,kh,kw], concentration score).
    The byte image is invariant to positive rescaling of the filter.
    """
    weights = checkpoint.tensors.get("stem.weight")
    if weights is None:
        raise ValueError("checkpoint has no stem convolution weights")
    if weights.ndim != 4 or weights.shape[1] != 3:
        raise ValueError(f"stem filters must be [K,3,kh,kw], got {weights.shape}")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    out = []
    for i in range(weights.shape[0]):
        image = _filter_bytes(weights[i])
        score = center_concentration(weights[i])
        _write_ppm_bytes(os.path.join(out_dir, f"filter_{i:03d}.ppm"), image)
        rows.append((i, score))
        out.append((i, image, score))
    with open(os.path.join(out_dir, "filters_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filter", "center_concentration"])
        for i, score in rows:
            writer.writerow([i, f"{score:.6f}"])
    return out


def mean_center_concentration(checkpoint: Checkpoint) -> float:
    """Average center-tap concentration over all stem filters."""
    weights = checkpoint.tensors.get("stem.weight")
    if weights is None:
        raise ValueError("checkpoint has no stem convolution weights")
    return float(np.mean([center_concentration(w) for w in weights]))


def _write_ppm_bytes(path, image):
    """Write a [3,h,w] uint8 array as binary P6."""
    h, w = image.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())
