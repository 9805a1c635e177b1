"""Discrete-measure containers shared across the solver and metric modules."""

from dataclasses import dataclass

import numpy as np

__all__ = ["DiscreteMeasure", "WeightedDensity", "DensityField"]

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure with finitely many atoms: points (n, m), positive
    weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights length mismatch")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1.0, len(w)):
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def is_uniform(self, tol=1e-14):
        w = self.weights
        return bool(np.ptp(w) <= tol * w[0])


@dataclass(frozen=True)
class WeightedDensity:
    """Quadrature-particle representation of a phase-space probability measure:
    points (M, 2d) laid out as [q, p], strictly positive weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray
    d: int

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[1] != 2 * self.d:
            raise ValueError(f"points must be (M, {2 * self.d}) for d={self.d}")
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights length mismatch")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL * max(1.0, len(w)):
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def m(self):
        return self.points.shape[0]

    @property
    def q(self):
        return self.points[:, : self.d]

    @property
    def p(self):
        return self.points[:, self.d:]

    def as_measure(self):
        return DiscreteMeasure(self.points, self.weights)

    def spatial_measure(self):
        return DiscreteMeasure(self.q, self.weights)


@dataclass(frozen=True)
class DensityField:
    """Charge density on a regular d-dimensional lattice.

    values[i, j, ...] is the density in the cell whose center is
    origin + (i + 1/2, j + 1/2, ...) * h;  sum(values) * h^d = 1.
    """

    values: np.ndarray
    origin: np.ndarray
    h: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        origin = np.asarray(self.origin, dtype=float).ravel()
        if vals.ndim != origin.shape[0]:
            raise ValueError("origin dimension must match lattice rank")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", origin)

    @property
    def d(self):
        return self.values.ndim

    @property
    def cell_volume(self):
        return self.h ** self.d

    @property
    def total_mass(self):
        return float(self.values.sum() * self.cell_volume)

    @property
    def max_value(self):
        return float(self.values.max())

    def cell_centers(self):
        axes = [self.origin[k] + (np.arange(self.values.shape[k]) + 0.5) * self.h
                for k in range(self.d)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def as_measure(self, drop_below=0.0):
        """Cell-center atoms weighted by cell mass; cells with density
        <= drop_below are discarded and the rest renormalized."""
        centers = self.cell_centers()
        w = self.values.ravel() * self.cell_volume
        keep = self.values.ravel() > drop_below
        w = w[keep]
        return DiscreteMeasure(centers[keep], w / w.sum())
