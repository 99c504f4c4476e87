"""Labeled datasets in the unit box: synthetic generators, CSV I/O and splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import derive_rng

GENERATORS = ("gaussian-blobs", "concentric-rings", "xor-grid")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Finite sample ``(x_i, y_i)`` with ``x_i`` in ``[0,1]^n`` and 1-based labels ``y_i`` in ``1..m``."""

    x: np.ndarray
    y: np.ndarray
    m: int

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64, copy=True)
        y = np.array(self.y, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise DatasetError(f"features must be a nonempty (N, n) array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DatasetError(f"expected {x.shape[0]} labels, got shape {y.shape}")
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DatasetError("labels must be integers")
        y = y.astype(np.int64)
        if self.m < 2:
            raise DatasetError("need at least two classes")
        if y.min() < 1 or y.max() > self.m:
            raise DatasetError(f"labels must lie in 1..{self.m}")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise DatasetError("features must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def with_features(self, x: np.ndarray, clamp: bool = True) -> "LabeledDataset":
        """Same labels, new features (clamped to the unit box by default)."""
        x = np.asarray(x, dtype=np.float64)
        if clamp:
            x = np.clip(x, 0.0, 1.0)
        return LabeledDataset(x, self.y, self.m)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.m)

    def equals(self, other: "LabeledDataset") -> bool:
        return (self.m == other.m and np.array_equal(self.y, other.y)
                and np.array_equal(self.x, other.x))


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "gaussian-blobs"
    n: int = 2
    m: int = 3
    N: int = 300
    seed: int = 0
    separation: float = 4.0
    # features are mapped into [margin, 1 - margin] so attacks have room before clamping
    margin: float = 0.05


def _balanced_labels(N: int, m: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(N) % m
    rng.shuffle(y)
    return y


def _box_map(raw: np.ndarray, lo: np.ndarray, hi: np.ndarray, margin: float) -> np.ndarray:
    """Similarity map of the box ``[lo, hi]`` into ``[margin, 1 - margin]^n``, then clamp.

    The box depends only on the DatasetSpec, so independent draws share one map.
    Every coordinate gets the same scale, which keeps the geometry.
    """
    span = float((hi - lo).max())
    centre = (lo + hi) / 2.0
    out = 0.5 + (1.0 - 2.0 * margin) * (raw - centre) / span
    return np.clip(out, 0.0, 1.0)


# half-width, in noise standard deviations, of the box kept around the class supports
_TAIL = 4.0


def blob_centers(n: int, m: int, separation: float) -> np.ndarray:
    """Class centres with adjacent pairs ``separation`` (unit-variance noise) apart."""
    centers = np.zeros((m, n))
    if n == 1:
        centers[:, 0] = separation * np.arange(m)
    else:
        radius = separation / (2.0 * np.sin(np.pi / m))
        angles = 2.0 * np.pi * np.arange(m) / m
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def generate(spec: DatasetSpec) -> LabeledDataset:
    if spec.N <= 0:
        raise DatasetError("N must be positive")
    if spec.n <= 0 or spec.m < 2:
        raise DatasetError("need n >= 1 and m >= 2")
    if not 0.0 <= spec.margin < 0.5:
        raise DatasetError("margin must lie in [0, 0.5)")
    if spec.generator not in GENERATORS:
        raise DatasetError(f"unknown generator {spec.generator!r}; choose from {GENERATORS}")
    rng = derive_rng(spec.seed, "data.generate")
    labels = _balanced_labels(spec.N, spec.m, rng)

    if spec.generator == "gaussian-blobs":
        centers = blob_centers(spec.n, spec.m, spec.separation)
        raw = centers[labels] + rng.standard_normal((spec.N, spec.n))
        lo, hi = centers.min(axis=0) - _TAIL, centers.max(axis=0) + _TAIL
    elif spec.generator == "concentric-rings":
        if spec.n < 2:
            raise DatasetError("concentric-rings needs n >= 2")
        radius = spec.separation * (1.0 + labels)
        theta = rng.uniform(0.0, 2.0 * np.pi, spec.N)
        raw = rng.standard_normal((spec.N, spec.n)) * 0.5
        raw[:, 0] += radius * np.cos(theta)
        raw[:, 1] += radius * np.sin(theta)
        outer = spec.separation * spec.m + 0.5 * _TAIL
        lo, hi = np.full(spec.n, -0.5 * _TAIL), np.full(spec.n, 0.5 * _TAIL)
        lo[:2], hi[:2] = -outer, outer
    else:
        if spec.n < 2:
            raise DatasetError("xor-grid needs n >= 2")
        # cell (i, j) of an m x m grid carries class (i + j) mod m
        raw = np.empty((spec.N, spec.n))
        for k in range(spec.N):
            while True:
                i, j = rng.integers(0, spec.m, size=2)
                if (i + j) % spec.m == labels[k]:
                    break
            raw[k, :2] = spec.separation * np.array([i, j]) + rng.uniform(-0.5, 0.5, 2) * spec.separation * 0.8
        raw[:, 2:] = rng.standard_normal((spec.N, spec.n - 2))
        lo, hi = np.full(spec.n, -_TAIL), np.full(spec.n, _TAIL)
        lo[:2], hi[:2] = -0.4 * spec.separation, spec.separation * (spec.m - 0.6)
    return LabeledDataset(_box_map(raw, lo, hi, spec.margin), labels + 1, spec.m)


def save_csv(data: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(data.n)])
        for xi, yi in zip(data.x, data.y):
            writer.writerow([int(yi)] + [f"{v:.17g}" for v in xi])


def load_csv(path, m: int | None = None) -> LabeledDataset:
    """Read a ``label,f0,...`` CSV.  ``m`` defaults to the largest label seen."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = rows[0]
    n = len(header) - 1
    if n < 1 or header[0] != "label" or header[1:] != [f"f{j}" for j in range(n)]:
        raise DatasetError(f"{path}: header must be label,f0,...,f{{n-1}}")
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n + 1:
            raise DatasetError(f"{path}:{lineno}: expected {n + 1} fields, got {len(row)}")
        try:
            ys.append(int(row[0]))
            feats = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if not all(0.0 <= v <= 1.0 for v in feats):
            raise DatasetError(f"{path}:{lineno}: feature outside [0, 1]")
        xs.append(feats)
    if not xs:
        raise DatasetError(f"{path}: no samples")
    y = np.array(ys)
    if y.min() < 1:
        raise DatasetError(f"{path}: labels are 1-based")
    m_eff = int(y.max()) if m is None else m
    if y.max() > m_eff:
        raise DatasetError(f"{path}: label {y.max()} exceeds class count {m_eff}")
    return LabeledDataset(np.array(xs), y, max(m_eff, 2))


def split(data: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < fraction < 1.0:
        raise DatasetError("fraction must lie strictly between 0 and 1")
    n_train = int(round(fraction * len(data)))
    if n_train == 0 or n_train == len(data):
        raise DatasetError(f"split of {len(data)} samples at {fraction} leaves an empty side")
    perm = derive_rng(seed, "data.split").permutation(len(data))
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))
