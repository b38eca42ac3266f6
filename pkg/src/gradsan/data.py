"""Desk-scale datasets and sample-quality metrics."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) ints in [0, num_classes)
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 2 or len(pts) < 1:
            raise ValueError(f"points must be a non-empty (N, d) array, got shape {pts.shape}")
        if lab.shape != (len(pts),):
            raise ValueError(f"expected {len(pts)} labels, got shape {lab.shape}")
        if self.num_classes < 1 or lab.min() < 0 or lab.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.points[idx], self.labels[idx], self.num_classes, self.provenance)

    def content_hash(self) -> str:
        """Git blob hash of the canonical binary encoding."""
        body = (
            np.ascontiguousarray(self.points, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.labels, dtype="<i8").tobytes()
        )
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(modes) / modes
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def make_ring(modes: int = 8, n_per_mode: int = 250, radius: float = 2.0, std: float = 0.2,
              seed: int = 0) -> LabeledDataset:
    """Gaussian mixture with ``modes`` components evenly spaced on a circle."""
    if modes < 1:
        raise ValueError("need at least one mode")
    if n_per_mode < 1:
        raise ValueError("need at least one point per mode")
    rng = np.random.default_rng(seed)
    centers = ring_centers(modes, radius)
    labels = np.repeat(np.arange(modes), n_per_mode)
    points = centers[labels] + std * rng.normal(size=(len(labels), 2))
    order = rng.permutation(len(labels))
    return LabeledDataset(points[order], labels[order], modes,
                          f"ring(modes={modes},n={n_per_mode},r={radius},std={std},seed={seed})")


_GLYPHS = [
    # 0: ring
    "..####.."
    ".#....#."
    "#......#"
    "#......#"
    "#......#"
    "#......#"
    ".#....#."
    "..####..",
    # 1: vertical bar
    "...##..."
    "..###..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "..####..",
    # 2: zigzag
    ".#####.."
    "......#."
    "......#."
    ".....#.."
    "...##..."
    "..#....."
    ".#......"
    ".######.",
    # 3: cross
    "...##..."
    "...##..."
    "...##..."
    "########"
    "########"
    "...##..."
    "...##..."
    "...##...",
    # 4: diagonal X
    "#......#"
    ".#....#."
    "..#..#.."
    "...##..."
    "...##..."
    "..#..#.."
    ".#....#."
    "#......#",
    # 5: box
    "########"
    "#......#"
    "#......#"
    "#......#"
    "#......#"
    "#......#"
    "#......#"
    "########",
    # 6: ell
    ".#......"
    ".#......"
    ".#......"
    ".#......"
    ".#......"
    ".#......"
    ".######."
    ".######.",
    # 7: tee
    "########"
    "########"
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "...##..."
    "...##...",
    # 8: hourglass
    "########"
    ".#....#."
    "..#..#.."
    "...##..."
    "...##..."
    "..#..#.."
    ".#....#."
    "########",
    # 9: bars
    "........"
    "########"
    "........"
    "........"
    "########"
    "........"
    "........"
    "########",
]


def glyph_templates(num_classes: int) -> np.ndarray:
    """Binary 8x8 templates, flattened to 64-vectors."""
    if not 1 <= num_classes <= len(_GLYPHS):
        raise ValueError(f"num_classes must be in [1, {len(_GLYPHS)}]")
    return np.array([[1.0 if c == "#" else 0.0 for c in g] for g in _GLYPHS[:num_classes]])


def flip_intensities(ds: LabeledDataset) -> LabeledDataset:
    return LabeledDataset(1.0 - ds.points, ds.labels, ds.num_classes, ds.provenance + "+flipped")


def make_glyphs(num_classes: int = 10, n: int = 500, noise: float = 0.05, seed: int = 0,
                flipped: bool = False) -> LabeledDataset:
    """Template glyphs with each pixel flipped independently with probability ``noise``."""
    if n < 1:
        raise ValueError("need at least one glyph")
    if not 0 <= noise <= 1:
        raise ValueError("noise is a bit-flip probability in [0, 1]")
    rng = np.random.default_rng(seed)
    templates = glyph_templates(num_classes)
    labels = rng.integers(num_classes, size=n)
    points = templates[labels]
    if noise > 0:
        flips = rng.random(points.shape) < noise
        points = np.where(flips, 1.0 - points, points)
    ds = LabeledDataset(points, labels, num_classes,
                        f"glyphs(classes={num_classes},n={n},noise={noise},seed={seed})")
    return flip_intensities(ds) if flipped else ds


def mode_coverage(samples: np.ndarray, centers: np.ndarray, capture_radius: float,
                  min_share: float = 0.01) -> tuple[int, float]:
    """Count modes holding at least ``min_share`` of samples within ``capture_radius``.

    Returns:
        ``(covered_count, high_quality_fraction)``; the fraction is the share
        of samples within ``capture_radius`` of any center.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if len(centers) == 0:
        raise ValueError("need at least one center")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(samples) == 0:
        return 0, 0.0
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    within = d2 <= capture_radius**2
    per_mode = within.sum(axis=0) / len(samples)
    covered = int(np.sum(per_mode >= min_share))
    return covered, float(np.mean(within.any(axis=1)))


def hist_tvd(samples_a: np.ndarray, samples_b: np.ndarray, bins: int = 16,
             bounds: tuple[tuple[float, float], tuple[float, float]] = ((-3.0, 3.0), (-3.0, 3.0))) -> float:
    """Total variation distance between 2-D histograms on a fixed grid.

    Points outside ``bounds`` are clamped into the border cells.
    """
    def hist(s):
        s = np.asarray(s, dtype=np.float64)
        lo = np.array([bounds[0][0], bounds[1][0]])
        hi = np.array([bounds[0][1], bounds[1][1]])
        s = np.clip(s, lo, hi)
        h, _, _ = np.histogram2d(s[:, 0], s[:, 1], bins=bins, range=bounds)
        return h.ravel() / max(len(s), 1)

    return float(0.5 * np.abs(hist(samples_a) - hist(samples_b)).sum())


def logistic_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> float:
    """Accuracy on real held-out data of a logistic regression fit to generated data."""
    from sklearn.linear_model import LogisticRegression

    if len(np.unique(train_y)) < 2:
        return float(np.mean(np.asarray(test_y) == np.asarray(train_y)[0]))
    clf = LogisticRegression(max_iter=1000, random_state=seed)
    clf.fit(train_x, train_y)
    return float(clf.score(test_x, test_y))


def write_csv(path, points: np.ndarray, labels: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) != len(labels):
        raise ValueError(f"need (N, d) points matching {len(labels)} labels, got {points.shape}")
    d = points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for p, y in zip(points, labels):
            w.writerow([repr(float(v)) for v in p] + [int(y)])


def read_csv(path, num_classes: int | None = None) -> LabeledDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label" or not all(h == f"x{i}" for i, h in enumerate(rows[0][:-1])):
        raise ValueError(f"{path}: expected header x0,...,xd-1,label")
    body = rows[1:]
    points = np.array([[float(v) for v in r[:-1]] for r in body])
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(points, labels, k, f"csv({path.name})")


def glyph_mean_intensity(samples: np.ndarray) -> np.ndarray:
    """Per-sample mean pixel intensity."""
    return np.asarray(samples, dtype=np.float64).mean(axis=1)


def binomial_band(n: int, p: float, width: float) -> tuple[float, float]:
    """``n p +/- width * sqrt(n p (1 - p))``."""
    sd = math.sqrt(n * p * (1 - p))
    return n * p - width * sd, n * p + width * sd
