"""Grids, curves, nested indices, and the quadrature primitives.

Everything downstream works on a common evaluation grid over [0, 1] with
trapezoid quadrature weights, so that L2 inner products reduce to weighted
sums. All containers are immutable after construction; every operation here
is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DuplicateKeyError,
    EmptyDataError,
    GridMismatchError,
    InvalidGridError,
    MissingMeanError,
)

_DOMAIN_EPS = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def trapezoid_weights(points: Sequence[float] | np.ndarray) -> np.ndarray:
    """Trapezoid-rule quadrature weights for a strictly increasing grid.

    w[0] = (p1-p0)/2, w[m-1] = (p[m-1]-p[m-2])/2, interior
    w[j] = (p[j+1]-p[j-1])/2; the weights sum to the grid range.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise InvalidGridError("grid needs at least two points")
    if not np.all(np.isfinite(p)):
        raise InvalidGridError("grid points must be finite")
    if np.any(np.diff(p) <= 0):
        raise InvalidGridError("grid points must be strictly increasing")
    w = np.empty_like(p)
    w[0] = (p[1] - p[0]) / 2.0
    w[-1] = (p[-1] - p[-2]) / 2.0
    w[1:-1] = (p[2:] - p[:-2]) / 2.0
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    """Common evaluation grid on [0, 1] with quadrature weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = _readonly(self.points)
        weights = _readonly(self.weights)
        if points.ndim != 1 or points.size < 2:
            raise InvalidGridError("grid needs at least two points")
        if np.any(np.diff(points) <= 0):
            raise InvalidGridError("grid points must be strictly increasing")
        if points[0] < -_DOMAIN_EPS or points[-1] > 1.0 + _DOMAIN_EPS:
            raise InvalidGridError("grid points must lie in [0, 1]")
        if weights.shape != points.shape:
            raise InvalidGridError("weights must have one entry per point")
        if np.any(weights < 0):
            raise InvalidGridError("quadrature weights must be nonnegative")
        span = points[-1] - points[0]
        if abs(weights.sum() - span) > 1e-12 * max(span, 1.0):
            raise InvalidGridError(
                f"weights sum {weights.sum()!r} != grid range {span!r}"
            )
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_points(cls, points: Sequence[float] | np.ndarray) -> "Grid":
        """Grid with trapezoid weights on the given points."""
        return cls(np.asarray(points, dtype=float), trapezoid_weights(points))

    @classmethod
    def uniform(cls, m: int) -> "Grid":
        """Uniform grid of m points covering [0, 1]."""
        if m < 2:
            raise InvalidGridError("grid needs at least two points")
        return cls.from_points(np.linspace(0.0, 1.0, m))

    @property
    def size(self) -> int:
        return int(self.points.size)


def same_grid(a: Grid, b: Grid) -> bool:
    """Exact point-and-weight equality; shared references trivially match."""
    if a is b:
        return True
    return np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)


@dataclass(frozen=True, eq=False)
class Curve:
    """Values of one function evaluated on a Grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _readonly(self.values)
        if values.shape != self.grid.points.shape:
            raise GridMismatchError("curve values must match the grid length")
        if not np.all(np.isfinite(values)):
            raise InvalidGridError("curve values must be finite")
        object.__setattr__(self, "values", values)


def inner_product(f: Curve, g: Curve) -> float:
    """Quadrature L2 inner product sum_j w_j f(t_j) g(t_j)."""
    if not same_grid(f.grid, g.grid):
        raise GridMismatchError("curves live on different grids")
    return float(np.sum(f.grid.weights * f.values * g.values))


@dataclass(frozen=True, order=True)
class NestedIndex:
    """Position of one curve in the hierarchy: subject, measure, replicate.

    replicate is None for two-level data.
    """

    subject: int
    measure: int
    replicate: Optional[int] = None

    def __post_init__(self) -> None:
        if self.subject < 1 or self.measure < 1:
            raise EmptyDataError("subject and measure indices start at 1")
        if self.replicate is not None and self.replicate < 1:
            raise EmptyDataError("replicate indices start at 1")


@dataclass(frozen=True, eq=False)
class CurveSet:
    """A stack of curves on one Grid, indexed by NestedIndex.

    values holds one curve per row, in the same order as `index`.
    Label tuples map 1-based subject/measure indices back to the external
    string ids they came from (defaults to the index itself).
    """

    grid: Grid
    index: tuple[NestedIndex, ...]
    values: np.ndarray
    subject_labels: tuple[str, ...] = ()
    measure_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = _readonly(self.values)
        if values.ndim != 2 or values.shape != (len(self.index), self.grid.size):
            raise GridMismatchError(
                f"values must be ({len(self.index)}, {self.grid.size}), "
                f"got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidGridError("curve values must be finite")
        if len(set(self.index)) != len(self.index):
            raise DuplicateKeyError("nested indices must be unique")
        n_sub = max((ix.subject for ix in self.index), default=0)
        n_meas = max((ix.measure for ix in self.index), default=0)
        subject_labels = self.subject_labels or tuple(
            str(i) for i in range(1, n_sub + 1)
        )
        measure_labels = self.measure_labels or tuple(
            str(j) for j in range(1, n_meas + 1)
        )
        if len(subject_labels) != n_sub or len(measure_labels) != n_meas:
            raise EmptyDataError("label tuples must cover every index")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "index", tuple(self.index))
        object.__setattr__(self, "subject_labels", tuple(subject_labels))
        object.__setattr__(self, "measure_labels", tuple(measure_labels))

    def __len__(self) -> int:
        return len(self.index)

    def __iter__(self) -> Iterator[tuple[NestedIndex, np.ndarray]]:
        return zip(self.index, self.values)

    @property
    def n_subjects(self) -> int:
        return len({ix.subject for ix in self.index})

    @property
    def n_measures(self) -> int:
        return len({ix.measure for ix in self.index})

    def curve(self, row: int) -> Curve:
        return Curve(self.grid, self.values[row])

    def has_replicates(self) -> bool:
        return any(ix.replicate is not None for ix in self.index)

    def design_counts(self) -> dict[int, dict[int, int]]:
        """{subject: {measure: replicate count}} for the whole set."""
        counts: dict[int, dict[int, int]] = {}
        for ix in self.index:
            counts.setdefault(ix.subject, {}).setdefault(ix.measure, 0)
            counts[ix.subject][ix.measure] += 1
        return counts

    def is_balanced(self) -> bool:
        """Complete rectangular design: every subject has every measure with
        the same replicate count."""
        counts = self.design_counts()
        if not counts:
            return False
        measures = {frozenset(per.keys()) for per in counts.values()}
        if len(measures) != 1:
            return False
        reps = {k for per in counts.values() for k in per.values()}
        return len(reps) == 1

    def sorted(self) -> "CurveSet":
        """Rows reordered to canonical (subject, measure, replicate) order."""
        order = np.array(
            sorted(
                range(len(self.index)),
                key=lambda r: (
                    self.index[r].subject,
                    self.index[r].measure,
                    self.index[r].replicate or 0,
                ),
            )
        )
        return CurveSet(
            self.grid,
            tuple(self.index[r] for r in order),
            self.values[order],
            self.subject_labels,
            self.measure_labels,
        )


@dataclass(frozen=True)
class CenteringMeans:
    """Global mean plus per-measure deviations, as produced by measure_means."""

    global_mean: Curve
    measure_effects: Mapping[int, Curve] = field(default_factory=dict)


def center_rows(X: CurveSet, means: CenteringMeans) -> CurveSet:
    """Subtract the global mean and each row's measure effect.

    Row order is preserved. Raises MissingMeanError when a row's measure
    has no supplied effect curve (an empty mapping means no measure effects
    at all, which is allowed).
    """
    if not same_grid(means.global_mean.grid, X.grid):
        raise GridMismatchError("means live on a different grid")
    for eff in means.measure_effects.values():
        if not same_grid(eff.grid, X.grid):
            raise GridMismatchError("measure effects live on a different grid")
    centered = X.values - means.global_mean.values
    if means.measure_effects:
        rows = []
        for ix, row in zip(X.index, centered):
            eff = means.measure_effects.get(ix.measure)
            if eff is None:
                raise MissingMeanError(
                    f"no mean supplied for measure {ix.measure}"
                )
            rows.append(row - eff.values)
        centered = np.asarray(rows)
    return CurveSet(X.grid, X.index, centered, X.subject_labels, X.measure_labels)
