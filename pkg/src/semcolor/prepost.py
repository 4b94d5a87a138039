"""Pre- and post-processing around the networks.

Pre: edge detection, edge-bounded region labelling, adaptive thresholding.
Post: per-region uniform fill and the same-luminance-same-chroma constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

from semcolor.colorspace import ChromaMap
from semcolor.errors import ShapeError


@dataclass(frozen=True, eq=False)
class EdgeMap:
    strength: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.strength, dtype=np.float64)
        if s.ndim != 2:
            raise ShapeError(f"edge map must be 2-D, got {s.shape}")
        if s.size and (s.min() < 0 or s.max() > 1 or not np.all(np.isfinite(s))):
            raise ValueError("edge strengths must lie in [0, 1]")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "strength", s)


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Integer region id per pixel, ids in 0..count-1.

    Binary masks use count 2 even when only one class occurs.
    """

    labels: np.ndarray
    count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
            raise ShapeError("region labels must be a 2-D integer array")
        if self.count < 1 or labels.min() < 0 or labels.max() >= self.count:
            raise ValueError(f"labels must lie in 0..{self.count - 1}")
        labels = labels.astype(np.int64, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self):
        return self.labels.shape

    @classmethod
    def from_labels(cls, labels) -> "RegionMask":
        """Compact arbitrary integer ids to 0..k-1, preserving their order."""
        present, inverse = np.unique(np.asarray(labels), return_inverse=True)
        return cls(inverse.reshape(np.shape(labels)), len(present))


class EdgeDetector(Protocol):
    def detect(self, l: np.ndarray) -> np.ndarray:
        """Return per-pixel edge strength in [0, 1]."""
        ...


class GradientEdgeDetector:
    """Central-difference gradient magnitude, scaled by its maximum."""

    def detect(self, l: np.ndarray) -> np.ndarray:
        p = np.pad(np.asarray(l, dtype=np.float64), 1, mode="edge")
        gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
        gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
        mag = np.hypot(gx, gy)
        peak = mag.max()
        return mag / peak if peak > 0 else np.zeros_like(mag)


class PrecomputedEdges:
    """Wraps an edge map produced elsewhere, e.g. by a learned detector."""

    def __init__(self, edges: EdgeMap):
        self.edges = edges

    def detect(self, l: np.ndarray) -> np.ndarray:
        if self.edges.strength.shape != np.shape(l):
            raise ShapeError(f"edge map {self.edges.strength.shape} vs image {np.shape(l)}")
        return self.edges.strength


def detect_edges(l: np.ndarray, detector: EdgeDetector | None = None) -> EdgeMap:
    detector = detector or GradientEdgeDetector()
    return EdgeMap(np.clip(detector.detect(l), 0.0, 1.0))


def label_regions(edges: EdgeMap, threshold: float = 0.5) -> RegionMask:
    """Flood-fill the non-edge pixels into 4-connected regions.

    Edge pixels then join the neighbouring region they share the most
    4-neighbours with (lower label on ties), growing inward until every
    pixel has a label.
    """
    if not 0 < threshold < 1:
        raise ValueError("edge threshold must lie in (0, 1)")
    is_edge = edges.strength >= threshold
    comps, count = ndimage.label(~is_edge)
    if count == 0:
        return RegionMask(np.zeros(is_edge.shape, dtype=np.int64), 1)
    labels = comps.astype(np.int64) - 1  # -1 marks unassigned edge pixels
    h, w = labels.shape
    while np.any(labels < 0):
        padded = np.pad(labels, 1, constant_values=-1)
        neighbours = np.stack(
            [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
        )
        votes = np.zeros((count, h, w), dtype=np.int64)
        for nb in neighbours:
            valid = nb >= 0
            rows, cols = np.nonzero(valid)
            np.add.at(votes, (nb[valid], rows, cols), 1)
        has_vote = votes.max(axis=0) > 0
        update = (labels < 0) & has_vote
        # argmax returns the first maximum, i.e. the lower label on ties.
        labels = np.where(update, votes.argmax(axis=0), labels)
    return RegionMask(labels, count)


def _group_reduce(keys: np.ndarray, values: np.ndarray, how: str) -> np.ndarray:
    """Replace each value by its group's mean (or median), clipped to the group hull."""
    uniq, inv = np.unique(keys, return_inverse=True)
    n = len(uniq)
    if how == "mean":
        agg = np.bincount(inv, weights=values, minlength=n) / np.bincount(inv, minlength=n)
    elif how == "median":
        order = np.lexsort((values, inv))
        sorted_vals = values[order]
        starts = np.searchsorted(inv[order], np.arange(n))
        counts = np.bincount(inv, minlength=n)
        lo = sorted_vals[starts + (counts - 1) // 2]
        hi = sorted_vals[starts + counts // 2]
        agg = (lo + hi) / 2.0
    else:
        raise ValueError(f"unknown aggregator {how!r}")
    gmin = np.full(n, np.inf)
    gmax = np.full(n, -np.inf)
    np.minimum.at(gmin, inv, values)
    np.maximum.at(gmax, inv, values)
    # Clipping keeps constant groups bit-exact, which makes the fill idempotent.
    return np.clip(agg, gmin, gmax)[inv]


def _grouped_chroma(keys, ab: ChromaMap, how: str) -> ChromaMap:
    k = keys.ravel()
    a = _group_reduce(k, ab.a.ravel(), how).reshape(ab.shape)
    b = _group_reduce(k, ab.b.ravel(), how).reshape(ab.shape)
    return ChromaMap(a, b)


def uniform_fill(ab: ChromaMap, regions: RegionMask, how: str = "mean") -> ChromaMap:
    if regions.shape != ab.shape:
        raise ShapeError(f"regions {regions.shape} vs chroma {ab.shape}")
    return _grouped_chroma(regions.labels, ab, how)


def adaptive_threshold(l: np.ndarray, window: int = 31, offset: float = 0.0) -> RegionMask:
    """Label 1 where L exceeds its local window mean minus ``offset``.

    The window mean uses edge replication at the borders.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    l = np.asarray(l, dtype=np.float64)
    r = window // 2
    p = np.pad(l, r, mode="edge")
    integral = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    integral[1:, 1:] = p.cumsum(0).cumsum(1)
    h, w = l.shape
    sums = (
        integral[window : window + h, window : window + w]
        - integral[:h, window : window + w]
        - integral[window : window + h, :w]
        + integral[:h, :w]
    )
    n = window * window
    # Compare totals rather than means so integer-valued planes are exact.
    return RegionMask((l * n > sums - offset * n).astype(np.int64), 2)


def enforce_same_l_same_ab(
    l: np.ndarray,
    ab: ChromaMap,
    bin_width: float = 1.0,
    regions: RegionMask | None = None,
    how: str = "mean",
) -> ChromaMap:
    """Give every pixel in the same luminance bin the same chroma.

    Bins are floor(L / bin_width); with ``regions`` the groups are
    (region, bin) pairs.
    """
    l = np.asarray(l, dtype=np.float64)
    if l.shape != ab.shape:
        raise ShapeError(f"L plane {l.shape} vs chroma {ab.shape}")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    bins = np.floor(l / bin_width).astype(np.int64)
    if regions is not None:
        if regions.shape != l.shape:
            raise ShapeError(f"regions {regions.shape} vs L plane {l.shape}")
        span = int(bins.max() - bins.min()) + 1
        bins = regions.labels * span + (bins - bins.min())
    return _grouped_chroma(bins, ab, how)


def save_label_png(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")).astype(np.int64)


def save_edge_png(edges: EdgeMap, path) -> None:
    Image.fromarray(np.floor(edges.strength * 255 + 0.5).astype(np.uint8), mode="L").save(path)


def load_edge_png(path) -> EdgeMap:
    with Image.open(Path(path)) as im:
        return EdgeMap(np.asarray(im.convert("L")).astype(np.float64) / 255.0)
