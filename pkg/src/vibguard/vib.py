"""Visual imperceptible bound: per-image radius from the nearest other-class image.

For image i with nearest different-class neighbour j at l1 distance d_ij,
the bound for divisor k is ``sigma_i = d_ij / (2k)``. Distances are the
per-pixel mean absolute difference, so they live on the same [0, 1] scale as
pixel values, attack budgets and Gaussian noise std.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import _nnsearch
from ._accel import USE_NUMBA

log = logging.getLogger(__name__)


def _pair_sum(a, b, codes):
    if USE_NUMBA:
        return _nnsearch.pair_sum_codes(a, b) if codes else _nnsearch.pair_sum_float(a, b)
    return _nnsearch.pair_sum_codes_np(a, b) if codes else _nnsearch.pair_sum_float_np(a, b)


def _normalize(total, d, codes):
    return total / (255.0 * d) if codes else total / d


def l1_distance(a, b):
    """Mean absolute pixel difference between two image vectors."""
    a = np.ravel(a)
    b = np.ravel(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_distance: dimension mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("l1_distance: empty vectors")
    ca, cb = _nnsearch.to_codes(a), _nnsearch.to_codes(b)
    if ca is not None and cb is not None:
        return _normalize(_pair_sum(ca, cb, True), a.size, True)
    return _normalize(_pair_sum(np.asarray(a, np.float32), np.asarray(b, np.float32), False),
                      a.size, False)


def mean_abs_batch(a, b):
    """Row-wise :func:`l1_distance` for (n, d) arrays."""
    a = np.asarray(a).reshape(len(a), -1)
    b = np.asarray(b).reshape(len(b), -1)
    return np.array([l1_distance(x, y) for x, y in zip(a, b)])


def _prepare(images):
    codes = _nnsearch.to_codes(images)
    if codes is not None:
        return np.ascontiguousarray(codes), True
    return np.ascontiguousarray(images, dtype=np.float32), False


def _check_classes(labels):
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two classes to find a different-class neighbour")


def nearest_other_class(i, dataset):
    """(j, d_ij) for image ``i``: the closest image with a different label."""
    _check_classes(dataset.labels)
    X, codes = _prepare(dataset.images)
    labels = np.ascontiguousarray(dataset.labels, dtype=np.int64)
    j, s = _nnsearch.naive_search(X[i:i + 1], labels[i:i + 1], X, labels, codes)
    return int(j[0]), float(_normalize(s[0], X.shape[1], codes))


def nearest_other_class_all(images, labels, method="blocked"):
    """Neighbour index and distance for every row. ``method`` is 'blocked' or 'naive'."""
    _check_classes(labels)
    X, codes = _prepare(images)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if method == "blocked":
        j, s = _nnsearch.blocked_search(X, labels, X, labels, codes)
    elif method == "naive":
        j, s = _nnsearch.naive_search(X, labels, X, labels, codes)
    else:
        raise ValueError(f"unknown method {method!r}")
    return j, _normalize(s.astype(np.float64), X.shape[1], codes)


def sigma_for(distance, k):
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    return np.asarray(distance, dtype=np.float64) / (2.0 * k)


@dataclass(frozen=True)
class VibSummary:
    k: float
    sigma_min: float
    sigma_mean: float
    sigma_max: float

    def to_json(self):
        return {"k": self.k, "min": self.sigma_min, "mean": self.sigma_mean, "max": self.sigma_max}


@dataclass
class VibTable:
    """One row per image: neighbour index, distance, and sigma for each k."""

    neighbor: np.ndarray
    distance: np.ndarray
    ks: list
    sigma: dict = field(default_factory=dict)
    elapsed: float = 0.0

    def __post_init__(self):
        for k in self.ks:
            if k not in self.sigma:
                self.sigma[k] = sigma_for(self.distance, k)

    def __len__(self):
        return len(self.distance)

    @property
    def index(self):
        return np.arange(len(self.distance))

    def sigma_at(self, k):
        return self.sigma[k] if k in self.sigma else sigma_for(self.distance, k)

    def take(self, idx):
        """Rows ``idx`` (neighbour indices still refer to the original dataset)."""
        idx = np.asarray(idx)
        return VibTable(self.neighbor[idx], self.distance[idx], list(self.ks),
                        {k: v[idx] for k, v in self.sigma.items()})

    def summary(self, k):
        s = self.sigma_at(k)
        return VibSummary(float(k), float(s.min()), float(s.sum() / len(s)), float(s.max()))

    def summaries(self):
        return [self.summary(k) for k in self.ks]

    def entries(self):
        """Per-image records as dicts (small tables / debugging)."""
        return [
            {"index": i, "neighbor": int(self.neighbor[i]), "distance": float(self.distance[i]),
             "sigma": {k: float(self.sigma[k][i]) for k in self.ks}}
            for i in range(len(self))
        ]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "neighbor", "distance"] + [f"sigma_k{_fmt_k(k)}" for k in self.ks])
            for i in range(len(self)):
                w.writerow([i, int(self.neighbor[i]), repr(float(self.distance[i]))]
                           + [repr(float(self.sigma[k][i])) for k in self.ks])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if header[:3] != ["index", "neighbor", "distance"]:
                raise ValueError(f"{path}: not a VIB table (header {header[:3]})")
            ks = [float(h[len("sigma_k"):]) for h in header[3:]]
            rows = [row for row in r if row]
        idx = np.array([int(row[0]) for row in rows])
        if not np.array_equal(idx, np.arange(len(rows))):
            raise ValueError(f"{path}: index column must be 0..m-1 in order")
        nb = np.array([int(row[1]) for row in rows], dtype=np.int64)
        dist = np.array([float(row[2]) for row in rows])
        sigma = {k: np.array([float(row[3 + c]) for row in rows]) for c, k in enumerate(ks)}
        return cls(nb, dist, ks, sigma)

    def summary_json(self, path):
        with open(path, "w") as f:
            json.dump([s.to_json() for s in self.summaries()], f, indent=2)


def _fmt_k(k):
    return str(int(k)) if float(k).is_integer() else repr(float(k))


def load_summaries(path):
    with open(path) as f:
        return [VibSummary(r["k"], r["min"], r["mean"], r["max"]) for r in json.load(f)]


def compute_vib_table(dataset, ks=(1.0,), method="blocked"):
    """Nearest different-class neighbour for every image plus sigma per k."""
    ks = [float(k) for k in ks]
    if not ks or any(not k > 0 for k in ks):
        raise ValueError(f"all k must be positive, got {ks}")
    t0 = time.perf_counter()
    nb, dist = nearest_other_class_all(dataset.images, dataset.labels, method=method)
    elapsed = time.perf_counter() - t0
    m = len(dist)
    log.info("VIB search: %d images in %.1fs (%.0f queries/s)", m, elapsed, m / max(elapsed, 1e-9))
    return VibTable(nb, dist, ks, elapsed=elapsed)
