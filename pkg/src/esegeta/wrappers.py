"""Reduce a segmentation output to one scalar per class.

Two strategies: pixel-wise argmax assignment, and min-max normalisation followed
by an Otsu threshold (binary outputs only). In both cases the class scalar is the
sum of the raw scores over the pixels assigned to that class; the assignment mask
is frozen (no gradient flows through argmax or the threshold).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DegenerateInputError",
    "normalize",
    "otsu_threshold",
    "WrapResult",
    "wrap_pixelwise",
    "wrap_threshold",
    "PixelwiseWrapper",
    "ThresholdWrapper",
    "ClassTarget",
    "BoundTarget",
    "make_wrapper",
]

OTSU_BINS = 256


class DegenerateInputError(ValueError):
    pass


def _array(y) -> np.ndarray:
    return np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)


def normalize(y) -> np.ndarray:
    """(y - min) / (max - min), as float64."""
    a = _array(y)
    if a.size == 0:
        raise ValueError("cannot normalise an empty array")
    lo, hi = a.min(), a.max()
    if hi == lo:
        raise DegenerateInputError("degenerate range: max == min")
    return (a - lo) / (hi - lo)


def _otsu_bins(a: np.ndarray) -> np.ndarray:
    # bin k holds ((k-1)/256, k/256], so "value > k/256" <=> "bin >= k"
    return np.clip(np.ceil(a * OTSU_BINS).astype(np.int64) - 1, 0, OTSU_BINS - 1)


def otsu_threshold(y_norm) -> float:
    """Threshold in [0, 1] maximising between-class variance over a 256-bin histogram.

    Candidates are the bin edges k/256, k = 1..255; ties go to the smallest k.
    """
    a = _array(y_norm).ravel()
    if a.size == 0 or a.min() < 0 or a.max() > 1:
        raise ValueError("otsu_threshold expects values in [0, 1]")
    if np.unique(a).size < 2:
        raise DegenerateInputError("degenerate input: a single distinct value")
    hist = np.bincount(_otsu_bins(a), minlength=OTSU_BINS).astype(np.float64)
    centres = (np.arange(OTSU_BINS) + 0.5) / OTSU_BINS
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1] / total  # class 0 = bins [0, k)
    m0 = np.cumsum(hist * centres)[:-1]
    mt = (hist * centres).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / (w0 * total)
        mu1 = (mt - m0) / (w1 * total)
        between = w0 * w1 * (mu1 - mu0) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    if not np.isfinite(between).any():
        raise DegenerateInputError("degenerate input: all values fall in one histogram bin")
    k = int(np.argmax(between)) + 1
    return k / OTSU_BINS


@dataclass
class WrapResult:
    scalar: Tensor
    mask: np.ndarray  # per-pixel class labels, shape (B, *spatial)
    counts: np.ndarray  # pixels per class (the count form of the class output)
    threshold: Optional[float] = None


def _masked_sum(scores: Tensor, channel: int, region: np.ndarray) -> Tensor:
    chan = T.select(scores, 1, channel)
    m = Tensor(region.astype(np.float64), dtype=scores.dtype)
    return T.tsum(T.mul(chan, m))


def pixel_labels(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=1)  # first maximum -> lowest class index


def wrap_pixelwise(scores: Tensor, c: int, mask: Optional[np.ndarray] = None) -> WrapResult:
    """Sum of channel-`c` scores over pixels whose argmax class is `c`."""
    C = scores.shape[1]
    if C < 2:
        raise ValueError("pixel-wise wrapper needs at least 2 channels")
    if not 0 <= c < C:
        raise ValueError(f"class {c} out of range [0, {C})")
    labels = pixel_labels(scores.data) if mask is None else np.asarray(mask)
    counts = np.bincount(labels.ravel(), minlength=C)
    return WrapResult(_masked_sum(scores, c, labels == c), labels, counts)


def wrap_threshold(scores: Tensor, c: int, mask: Optional[np.ndarray] = None) -> WrapResult:
    """Binary wrapper: normalise, Otsu-threshold, sum raw scores over class-`c` pixels."""
    if scores.shape[1] != 1:
        raise ValueError(f"threshold wrapper needs a single-channel output, got {scores.shape[1]}")
    if c not in (0, 1):
        raise ValueError(f"class {c} out of range for the binary threshold wrapper")
    th = None
    if mask is None:
        y = normalize(scores)[:, 0]
        th = otsu_threshold(y)
        labels = (y > th).astype(np.int64)
    else:
        labels = np.asarray(mask)
    counts = np.bincount(labels.ravel(), minlength=2)
    return WrapResult(_masked_sum(scores, 0, labels == c), labels, counts, th)


@dataclass(frozen=True, eq=False)
class BoundTarget:
    """A class scalar with its region frozen from one clean forward pass.

    `region` is None for plain classification outputs (sum over the whole channel).
    """

    channel: int
    cls: int
    region: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = field(default=None)

    def score(self, out: Tensor) -> Tensor:
        chan = T.select(out, 1, self.channel)
        if self.region is None:
            return T.tsum(chan)
        region = self.region
        if chan.shape != region.shape:
            region = np.broadcast_to(region, chan.shape)
        return T.tsum(T.mul(chan, Tensor(region, dtype=out.dtype)))

    def score_batch(self, out: np.ndarray) -> np.ndarray:
        """Per-sample scalars for a batch of outputs, without graph recording."""
        chan = np.take(np.asarray(out, dtype=np.float64), self.channel, axis=1)
        if self.region is not None:
            chan = chan * self.region
        return chan.reshape(chan.shape[0], -1).sum(axis=1)


@dataclass(frozen=True)
class PixelwiseWrapper:
    cls: int
    strategy: str = "pixelwise"

    def bind(self, scores: np.ndarray) -> BoundTarget:
        C = scores.shape[1]
        if C < 2:
            raise ValueError("pixel-wise wrapper needs at least 2 channels")
        if not 0 <= self.cls < C:
            raise ValueError(f"class {self.cls} out of range [0, {C})")
        labels = pixel_labels(scores)
        region = (labels == self.cls).astype(np.float64)
        return BoundTarget(self.cls, self.cls, region, labels, np.bincount(labels.ravel(), minlength=C))


@dataclass(frozen=True)
class ThresholdWrapper:
    cls: int
    strategy: str = "threshold-otsu"

    def bind(self, scores: np.ndarray) -> BoundTarget:
        if scores.shape[1] != 1:
            raise ValueError(f"threshold wrapper needs a single-channel output, got {scores.shape[1]}")
        if self.cls not in (0, 1):
            raise ValueError(f"class {self.cls} out of range for the binary threshold wrapper")
        y = normalize(scores)[:, 0]
        labels = (y > otsu_threshold(y)).astype(np.int64)
        region = (labels == self.cls).astype(np.float64)
        return BoundTarget(0, self.cls, region, labels, np.bincount(labels.ravel(), minlength=2))


@dataclass(frozen=True)
class ClassTarget:
    """Plain classification-style target: the sum of output channel `cls`."""

    cls: int
    strategy: str = "class"

    def bind(self, scores: np.ndarray) -> BoundTarget:
        if not 0 <= self.cls < scores.shape[1]:
            raise ValueError(f"class {self.cls} out of range [0, {scores.shape[1]})")
        return BoundTarget(self.cls, self.cls)


Wrapper = Union[PixelwiseWrapper, ThresholdWrapper, ClassTarget]


def make_wrapper(strategy: str, cls: int) -> Wrapper:
    table = {"pixelwise": PixelwiseWrapper, "threshold-otsu": ThresholdWrapper, "class": ClassTarget}
    if strategy not in table:
        raise ValueError(f"unknown wrapper strategy {strategy!r}")
    return table[strategy](cls)
