"""Bernoulli drop masks: sampling policies and application to images.

A mask M has entries in {0,1}; entry 0 with probability ``rate``. Subsampled
images are the elementwise product X*M, so gradients through apply_mask pick
up the same mask. Element granularity draws every entry independently; pixel
granularity draws one value per spatial location and replicates it across
channels.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mul

GRANULARITIES = ("element", "pixel")
POLICY_KINDS = ("none", "fixed", "uniform")


@dataclass
class Mask:
    """A realized drop mask plus the rate it was drawn at."""

    bits: np.ndarray
    rate: float

    def kept_fraction(self) -> float:
        return float(self.bits.mean())


@dataclass
class DropPolicy:
    """How training/evaluation picks a drop rate and mask shape per draw.

    kind "none" never drops, "fixed" always uses ``rate``, "uniform" redraws
    the rate uniformly from [0, 1) for every image and epoch.
    """

    kind: str = "none"
    rate: float = 0.0
    granularity: str = "element"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown drop policy kind {self.kind!r}; pick from {POLICY_KINDS}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}; pick from {GRANULARITIES}")
        if self.kind == "fixed" and not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"fixed drop rate must lie in [0, 1], got {self.rate}")

    def label(self) -> str:
        if self.kind == "fixed":
            return f"fixed({self.rate:g})"
        return self.kind


def draw_rate(policy: DropPolicy, rng: np.random.Generator) -> float:
    """Drop rate for one image: 0, the fixed rate, or a fresh uniform draw."""
    if policy.kind == "none":
        return 0.0
    if policy.kind == "fixed":
        return float(policy.rate)
    return float(rng.random())


def sample_mask(shape, rate, rng: np.random.Generator, granularity="element") -> Mask:
    """Draw a Bernoulli(1-rate) keep mask of the given [C,H,W] or [N,C,H,W] shape.

    Pixel granularity draws once per spatial location and copies the value
    across the channel axis.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop rate must lie in [0, 1], got {rate}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}; pick from {GRANULARITIES}")
    shape = tuple(int(s) for s in shape)

    if granularity == "element":
        # random() < 1 always, so rate 0 keeps everything; rate 1 keeps nothing.
        bits = (rng.random(shape) >= rate)
    else:
        if len(shape) == 3:
            plane = rng.random(shape[1:]) >= rate
            bits = np.broadcast_to(plane[None], shape)
        elif len(shape) == 4:
            plane = rng.random((shape[0],) + shape[2:]) >= rate
            bits = np.broadcast_to(plane[:, None], shape)
        else:
            raise ValueError(f"pixel granularity needs [C,H,W] or [N,C,H,W], got {shape}")
    return Mask(bits=np.ascontiguousarray(bits, dtype=np.float32), rate=float(rate))


def apply_mask(x, mask: Mask):
    """Elementwise product X*M.

    Accepts an autodiff tensor (returns one, gradient flows as g*M) or a
    plain array (returns an array). Shapes must match exactly.
    """
    bits = mask.bits
    if isinstance(x, Tensor):
        if x.data.shape != bits.shape:
            raise ValueError(f"mask shape {bits.shape} != image shape {x.data.shape}")
        return mul(x, Tensor(bits.astype(x.data.dtype, copy=False)))
    x = np.asarray(x)
    if x.shape != bits.shape:
        raise ValueError(f"mask shape {bits.shape} != image shape {x.shape}")
    return x * bits.astype(x.dtype, copy=False)
