"""Nested multilevel functional model fitting (two- and three-level).

Moment estimators for the per-level covariance surfaces, the sandwich-form
total covariance, diagonal-gap noise estimation, per-level eigensystems, and
BLUP score prediction, orchestrated by fit_nested.

Covariance identities used throughout (balanced designs, centered rows r):

* total: sum of same-row products / (n J) or (n J K).
* between subjects: cross-products of distinct measures within a subject,
  computed via the subject-sum identity
  sum_{j != j'} r_ij r_ij'^T = S_i S_i^T - sum_j r_ij r_ij^T.
* within (subject, measure): cross-products of distinct replicates,
  via the same identity one level down.

Same-row products put the white-noise nugget on the diagonal, so the deepest
level's surface gets its diagonal replaced by the smoothed off-diagonal
extension before eigendecomposition, and the gap estimates the noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CenteringMeans, Curve, CurveSet, Grid, center_rows
from .errors import (
    DimensionError,
    EmptyDataError,
    InsufficientDataError,
    SingularSystemError,
    UnbalancedDesignError,
)
from .fpca import (
    DEFAULT_BANDWIDTH,
    EigenSystem,
    eigendecompose,
    estimate_noise_gap,
    select_k,
    smooth_covariance,
)

# A level whose eigenvalue mass is below this fraction of the fit's total
# variance retains zero components instead of fitting noise dust.
DEGENERATE_LEVEL_FRACTION = 1e-10

# Bandwidth of the internal smooth used for the diagonal extension and the
# noise gap. Kept narrow: the Nadaraya-Watson curvature bias grows with the
# squared bandwidth and would leak surface mass into the noise estimate.
NOISE_BANDWIDTH = 0.015


@dataclass(frozen=True)
class FitConfig:
    """Knobs for fit_nested.

    smooth applies kernel smoothing (at `bandwidth`) to every level surface
    before eigendecomposition. The diagonal correction and noise estimation
    run regardless of `smooth`, always at `noise_bandwidth`.
    center_measures=False skips the per-measure means (one-way layout).
    """

    levels: int = 2
    pve: float = 0.99
    smooth: bool = False
    bandwidth: float = DEFAULT_BANDWIDTH
    noise_bandwidth: float = NOISE_BANDWIDTH
    center_measures: bool = True


@dataclass(frozen=True, eq=False)
class LevelCovariances:
    """Moment-estimated covariance surfaces for one nested fit.

    Two-level fits populate sigma_T / sigma_B / sigma_W; three-level fits
    populate the cross-product surfaces h1 / h2 / h3 and the per-level
    surfaces k1 / k2 / k3 (k3 diagonal already replaced by the smoothed
    extension).
    """

    noise_variance: float
    sigma_T: Optional[np.ndarray] = None
    sigma_B: Optional[np.ndarray] = None
    sigma_W: Optional[np.ndarray] = None
    h1: Optional[np.ndarray] = None
    h2: Optional[np.ndarray] = None
    h3: Optional[np.ndarray] = None
    k1: Optional[np.ndarray] = None
    k2: Optional[np.ndarray] = None
    k3: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class MultilevelFit:
    """Fitted nested model: means, per-level eigensystems, scores, noise.

    scores[l] has one row per level-(l+1) unit, listed in `units[l]` as
    (subject,), (subject, measure), or (subject, measure, replicate) keys in
    canonical sorted order.
    """

    grid: Grid
    levels: int
    global_mean: Curve
    measure_effects: tuple[Curve, ...]
    level_eig: tuple[EigenSystem, ...]
    scores: tuple[np.ndarray, ...]
    units: tuple[tuple[tuple[int, ...], ...], ...]
    noise_variance: float
    subject_labels: tuple[str, ...] = ()
    measure_labels: tuple[str, ...] = ()
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def retained(self) -> tuple[int, ...]:
        return tuple(eig.n_components for eig in self.level_eig)

    def level_variance_sums(self) -> tuple[float, ...]:
        return tuple(float(eig.eigenvalues.sum()) for eig in self.level_eig)

    def variance_shares(self) -> dict[str, float]:
        """Fraction of total fitted variance per level plus the noise share."""
        sums = self.level_variance_sums()
        total = sum(sums) + self.noise_variance
        shares = {
            f"level{l + 1}": s / total for l, s in enumerate(sums)
        }
        shares["noise"] = self.noise_variance / total
        return shares


def measure_means(X: CurveSet, center_measures: bool = True) -> CenteringMeans:
    """Grand mean plus per-measure deviations with sum_j n_j eta_j = 0.

    With center_measures=False only the grand mean is estimated and the
    measure effects are left empty (interchangeable measures).
    """
    if len(X) == 0:
        raise EmptyDataError("cannot estimate means from an empty curve set")
    grand = X.values.mean(axis=0)
    effects: dict[int, Curve] = {}
    if center_measures:
        measures = sorted({ix.measure for ix in X.index})
        for j in measures:
            rows = [r for r, ix in enumerate(X.index) if ix.measure == j]
            if not rows:
                raise EmptyDataError(f"measure {j} has no rows")
            effects[j] = Curve(X.grid, X.values[rows].mean(axis=0) - grand)
    return CenteringMeans(Curve(X.grid, grand), effects)


def _rows_by_subject_measure(X: CurveSet) -> dict[int, dict[int, list[int]]]:
    table: dict[int, dict[int, list[int]]] = {}
    for r, ix in enumerate(X.index):
        table.setdefault(ix.subject, {}).setdefault(ix.measure, []).append(r)
    return table


def _balance_report(table: dict[int, dict[int, list[int]]]) -> str:
    parts = []
    for i in sorted(table):
        per = ", ".join(
            f"measure {j}: {len(rows)}" for j, rows in sorted(table[i].items())
        )
        parts.append(f"subject {i} [{per}]")
    return "; ".join(parts)


def canonical_design(X: CurveSet, levels: int) -> tuple[np.ndarray, int, int, int]:
    """Validate a balanced nested design and reshape it canonically.

    Returns (values, n, J, K_rep) with values of shape (n, J, K_rep, m) in
    sorted (subject, measure, replicate) order. levels=2 requires exactly one
    replicate per (subject, measure); levels=3 requires K_rep >= 2.
    """
    if levels not in (2, 3):
        raise InsufficientDataError("nested fits support levels 2 or 3")
    table = _rows_by_subject_measure(X)
    if not table:
        raise EmptyDataError("empty curve set")
    subjects = sorted(table)
    measure_sets = {frozenset(per.keys()) for per in table.values()}
    rep_counts = {len(rows) for per in table.values() for rows in per.values()}
    if len(measure_sets) != 1 or len(rep_counts) != 1:
        raise UnbalancedDesignError(
            "design is not balanced: " + _balance_report(table)
        )
    measures = sorted(next(iter(measure_sets)))
    if measures != list(range(1, len(measures) + 1)) or subjects != list(
        range(1, len(subjects) + 1)
    ):
        raise UnbalancedDesignError(
            "subject/measure indices must be contiguous from 1: "
            + _balance_report(table)
        )
    K_rep = rep_counts.pop()
    n, J = len(subjects), len(measures)
    if J < 2:
        raise InsufficientDataError("nested fits need at least two measures")
    if levels == 2 and K_rep != 1:
        raise UnbalancedDesignError(
            f"two-level fit requires one row per (subject, measure); "
            f"found {K_rep} replicates"
        )
    if levels == 3 and K_rep < 2:
        raise InsufficientDataError(
            "three-level fit needs at least two replicates per measure"
        )
    m = X.grid.size
    values = np.empty((n, J, K_rep, m))
    for i in subjects:
        for j in measures:
            rows = table[i][j]
            rows_sorted = sorted(rows, key=lambda r: X.index[r].replicate or 0)
            values[i - 1, j - 1] = X.values[rows_sorted]
    return values, n, J, K_rep


def sigma_T_hat(X: CurveSet, means: CenteringMeans) -> np.ndarray:
    """Total covariance surface of centered rows with 1/(nJ) normalization."""
    r = center_rows(X, means)
    canonical_design(X, levels=2)
    if len(r) < 2:
        raise InsufficientDataError("total covariance needs at least two rows")
    S = (r.values.T @ r.values) / len(r)
    return 0.5 * (S + S.T)


def sigma_B_hat(X: CurveSet, means: CenteringMeans) -> np.ndarray:
    """Between-subject surface from cross-products of distinct measures.

    The U-statistic with 1/(nJ(J-1)) normalization, computed through the
    subject-sum identity; unbiased for the subject-level surface.
    """
    r = center_rows(X, means)
    rv, n, J, _ = canonical_design(r, levels=2)
    rows = rv[:, :, 0, :]  # (n, J, m)
    subject_sums = rows.sum(axis=1)  # (n, m)
    cross = subject_sums.T @ subject_sums
    same = np.einsum("ijs,ijt->st", rows, rows)
    S = (cross - same) / (n * J * (J - 1))
    return 0.5 * (S + S.T)


def sigma_W_hat(sigma_T: np.ndarray, sigma_B: np.ndarray) -> np.ndarray:
    """Within-subject surface as the entrywise difference total - between."""
    sigma_T = np.asarray(sigma_T, dtype=float)
    sigma_B = np.asarray(sigma_B, dtype=float)
    if sigma_T.shape != sigma_B.shape:
        raise DimensionError(
            f"shape mismatch: {sigma_T.shape} vs {sigma_B.shape}"
        )
    return sigma_T - sigma_B


def total_design_matrix(n_rows: int) -> np.ndarray:
    """Design matrix G_T = (1/N)(I - 11^T/N) so X^T G_T X is the grand-mean
    centered covariance with 1/N normalization."""
    if n_rows < 1:
        raise DimensionError("need at least one row")
    return (np.eye(n_rows) - np.full((n_rows, n_rows), 1.0 / n_rows)) / n_rows


def sandwich_covariance(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Sandwich-form surface X^T G X for a row-stacked data matrix."""
    X = np.asarray(X, dtype=float)
    G = np.asarray(G, dtype=float)
    if X.ndim != 2 or G.shape != (X.shape[0], X.shape[0]):
        raise DimensionError(
            f"G must be {X.shape[0]}x{X.shape[0]} for data {X.shape}"
        )
    return X.T @ G @ X


def estimate_noise(
    raw_within: np.ndarray, smoothed_within: np.ndarray, grid: Grid
) -> float:
    """Noise variance from the mean raw-minus-smoothed diagonal gap."""
    raw_within = np.asarray(raw_within, dtype=float)
    if raw_within.shape != (grid.size, grid.size):
        raise DimensionError("within surface does not match the grid")
    return estimate_noise_gap(raw_within, smoothed_within)


def _replace_diagonal(surface: np.ndarray, smoothed: np.ndarray) -> np.ndarray:
    out = surface.copy()
    np.fill_diagonal(out, np.diag(smoothed))
    return out


def two_level_covariances(
    X: CurveSet, means: CenteringMeans, noise_bandwidth: float = NOISE_BANDWIDTH
) -> LevelCovariances:
    """Sigma_T, Sigma_B, Sigma_W plus the diagonal-gap noise estimate."""
    s_T = sigma_T_hat(X, means)
    s_B = sigma_B_hat(X, means)
    s_W = sigma_W_hat(s_T, s_B)
    smoothed_W = smooth_covariance(s_W, X.grid, noise_bandwidth)
    sigma2 = estimate_noise(s_W, smoothed_W, X.grid)
    return LevelCovariances(
        noise_variance=sigma2, sigma_T=s_T, sigma_B=s_B, sigma_W=s_W
    )


def three_level_covariances(
    X: CurveSet, means: CenteringMeans, noise_bandwidth: float = NOISE_BANDWIDTH
) -> LevelCovariances:
    """Cross-product surfaces H1/H2/H3 and level surfaces K1/K2/K3.

    H1 averages products across distinct measures within a subject, H2 across
    distinct replicates within a (subject, measure), H3 over same-row
    products. K1 = H1, K2 = H2 - H1, and K3 = H3 - H2 with its diagonal
    replaced by the smoothed off-diagonal extension; the diagonal gap gives
    the noise variance.
    """
    r = center_rows(X, means)
    rv, n, J, K_rep = canonical_design(r, levels=3)
    m = X.grid.size
    flat = rv.reshape(-1, m)
    same = flat.T @ flat  # sum of same-row products
    unit_sums = rv.sum(axis=2)  # (n, J, m)
    unit_flat = unit_sums.reshape(-1, m)
    within_unit = unit_flat.T @ unit_flat  # includes same-row terms
    subject_sums = unit_sums.sum(axis=1)  # (n, m)
    across = subject_sums.T @ subject_sums

    h3 = same / (n * J * K_rep)
    h2 = (within_unit - same) / (n * J * K_rep * (K_rep - 1))
    h1 = (across - within_unit) / (n * J * (J - 1) * K_rep**2)
    h1, h2, h3 = (0.5 * (h + h.T) for h in (h1, h2, h3))

    k1 = h1
    k2 = h2 - h1
    raw3 = h3 - h2
    smoothed3 = smooth_covariance(raw3, X.grid, noise_bandwidth)
    sigma2 = estimate_noise(raw3, smoothed3, X.grid)
    k3 = _replace_diagonal(raw3, smoothed3)
    return LevelCovariances(
        noise_variance=sigma2, h1=h1, h2=h2, h3=h3, k1=k1, k2=k2, k3=k3
    )


def blup_scores(
    X: CurveSet,
    means: CenteringMeans,
    level_eig: tuple[EigenSystem, ...],
    noise_variance: float,
) -> tuple[np.ndarray, ...]:
    """Best linear unbiased predictions of the per-level scores.

    For each subject, the centered rows are stacked into one long vector y
    and regressed on the joint basis whose columns hold the level-1
    eigenfunctions (shared by all of the subject's rows) and the level-2/3
    eigenfunctions (placed per measure / per row). With score covariance
    L = diag(eigenvalues), the predictor L B^T (B L B^T + s2 I)^{-1} y is
    evaluated through its low-dimensional form; s2 = 0 takes the
    pseudo-inverse limit. One solve per subject.
    """
    levels = len(level_eig)
    r = center_rows(X, means)
    rv, n, J, K_rep = canonical_design(r, levels=2 if levels == 2 else 3)
    m = X.grid.size
    rows_per_subject = J * K_rep

    k_per_level = [eig.n_components for eig in level_eig]
    units_per_level = [1, J, J * K_rep][:levels]
    lam = np.concatenate(
        [
            np.tile(level_eig[l].eigenvalues, units_per_level[l])
            for l in range(levels)
        ]
    ) if sum(k_per_level) else np.zeros(0)

    blocks = [np.tile(level_eig[0].functions, (rows_per_subject, 1))]
    if levels >= 2:
        blocks.append(
            np.kron(np.eye(J), np.tile(level_eig[1].functions, (K_rep, 1)))
        )
    if levels == 3:
        blocks.append(np.kron(np.eye(J * K_rep), level_eig[2].functions))
    B = np.hstack(blocks)

    positive = lam > 0
    A = B[:, positive] * np.sqrt(lam[positive])
    q = int(positive.sum())

    out = [np.zeros((n * units_per_level[l], k_per_level[l])) for l in range(levels)]
    if q == 0:
        return tuple(out)

    if noise_variance > 0:
        gram = A.T @ A + noise_variance * np.eye(q)
    else:
        if np.linalg.matrix_rank(A) < q:
            raise SingularSystemError(
                "zero noise variance with a collinear score basis; the "
                "design is shared, so every subject's system is singular"
            )
        pinv_A = np.linalg.pinv(A)

    offsets = np.concatenate(
        [[0], np.cumsum([k_per_level[l] * units_per_level[l] for l in range(levels)])]
    )
    for i in range(n):
        y = rv[i].reshape(-1)
        if noise_variance > 0:
            coef = np.linalg.solve(gram, A.T @ y)
        else:
            coef = pinv_A @ y
        s = np.zeros(lam.size)
        s[positive] = np.sqrt(lam[positive]) * coef
        for l in range(levels):
            block = s[offsets[l] : offsets[l + 1]]
            out[l][
                i * units_per_level[l] : (i + 1) * units_per_level[l]
            ] = block.reshape(units_per_level[l], k_per_level[l])
    return tuple(out)


def _level_units(n: int, J: int, K_rep: int, levels: int):
    u1 = tuple((i,) for i in range(1, n + 1))
    u2 = tuple((i, j) for i in range(1, n + 1) for j in range(1, J + 1))
    if levels == 2:
        return (u1, u2)
    u3 = tuple(
        (i, j, k)
        for i in range(1, n + 1)
        for j in range(1, J + 1)
        for k in range(1, K_rep + 1)
    )
    return (u1, u2, u3)


def fit_nested(X: CurveSet, config: FitConfig = FitConfig()) -> MultilevelFit:
    """Full nested fit: means, level surfaces, eigensystems, noise, scores."""
    _, n, J, K_rep = canonical_design(X, levels=config.levels)
    means = measure_means(X, center_measures=config.center_measures)

    if config.levels == 2:
        cov = two_level_covariances(X, means, config.noise_bandwidth)
        narrow_smooth = smooth_covariance(
            cov.sigma_W, X.grid, config.noise_bandwidth
        )
        surfaces = [
            cov.sigma_B,
            _replace_diagonal(cov.sigma_W, narrow_smooth),
        ]
        if config.smooth:
            smoothed_W = smooth_covariance(cov.sigma_W, X.grid, config.bandwidth)
            surfaces = [
                smooth_covariance(cov.sigma_B, X.grid, config.bandwidth),
                _replace_diagonal(smoothed_W, narrow_smooth),
            ]
    else:
        cov = three_level_covariances(X, means, config.noise_bandwidth)
        surfaces = [cov.k1, cov.k2, cov.k3]
        if config.smooth:
            surfaces = [
                smooth_covariance(cov.k1, X.grid, config.bandwidth),
                smooth_covariance(cov.k2, X.grid, config.bandwidth),
                cov.k3,  # diagonal already narrow-smoothed; off-diagonal raw
            ]
    sigma2 = cov.noise_variance

    full_eigs = [eigendecompose(surface, X.grid) for surface in surfaces]
    scale = sum(eig.eigenvalues.sum() for eig in full_eigs) + sigma2
    level_eigs = []
    for eig in full_eigs:
        if eig.eigenvalues.sum() <= DEGENERATE_LEVEL_FRACTION * scale:
            level_eigs.append(eig.truncated(0))
        else:
            level_eigs.append(eig.truncated(select_k(eig, config.pve)))
    level_eigs = tuple(level_eigs)

    scores = blup_scores(X, means, level_eigs, sigma2)

    measures = sorted(means.measure_effects)
    return MultilevelFit(
        grid=X.grid,
        levels=config.levels,
        global_mean=means.global_mean,
        measure_effects=tuple(means.measure_effects[j] for j in measures),
        level_eig=level_eigs,
        scores=scores,
        units=_level_units(n, J, K_rep, config.levels),
        noise_variance=sigma2,
        subject_labels=X.subject_labels,
        measure_labels=X.measure_labels,
        config=config,
    )
