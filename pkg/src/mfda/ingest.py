"""Reading and writing curve datasets and fit artifacts.

One ingestion format: long (tidy) CSV with columns subject, measure,
replicate, t, value, channel; one channel is analyzed per fit. Fits are
written as a directory of CSV files plus JSON manifests. All writers emit
deterministic bytes: fixed column order, shortest round-trip float
formatting, LF newlines, sorted JSON keys.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import FORMAT_VERSION, __version__
from .core import Curve, CurveSet, Grid, NestedIndex
from .errors import (
    DuplicateKeyError,
    EmptyDataError,
    IncompleteCurveError,
    InvalidParameterError,
    ParseError,
)
from .fpca import EigenSystem, FpcaFit
from .mfpca import FitConfig, MultilevelFit

LONG_COLUMNS = ("subject", "measure", "replicate", "t", "value", "channel")

GRID_POLICIES = ("strict", "intersect")


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips to the same float."""
    return repr(float(x))


def _label_key(label: str):
    """Numeric labels sort numerically, everything else lexicographically."""
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


@dataclass(frozen=True)
class IngestReport:
    """What the reader saw: design counts, balance, and dropped grid points."""

    n_rows: int
    n_curves: int
    subjects: tuple[str, ...]
    measures: tuple[str, ...]
    counts: dict[str, dict[str, int]]  # subject label -> measure label -> reps
    balanced: bool
    dropped_points: tuple[float, ...] = ()


def read_long_csv(
    path: Union[str, Path], channel: str, grid_policy: str = "strict"
) -> tuple[CurveSet, IngestReport]:
    """Group long-format records of one channel into a CurveSet.

    'strict' rejects any grid mismatch between curves; 'intersect' restricts
    every curve to the common grid and reports the dropped points.
    """
    if grid_policy not in GRID_POLICIES:
        raise InvalidParameterError(f"grid_policy must be one of {GRID_POLICIES}")
    path = Path(path)
    groups: dict[tuple[str, str, int], dict[float, float]] = {}
    n_rows = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != set(LONG_COLUMNS):
            raise ParseError(
                f"{path}: header must contain exactly the columns "
                f"{', '.join(LONG_COLUMNS)}"
            )
        for record in reader:
            line = reader.line_num
            if any(record.get(c) in (None, "") for c in LONG_COLUMNS):
                raise ParseError(f"{path}:{line}: incomplete row")
            if record["channel"] != channel:
                continue
            try:
                replicate = int(record["replicate"])
                t = float(record["t"])
                value = float(record["value"])
            except ValueError as exc:
                raise ParseError(f"{path}:{line}: {exc}") from None
            if not (np.isfinite(t) and np.isfinite(value)):
                raise ParseError(f"{path}:{line}: non-finite t or value")
            key = (record["subject"], record["measure"], replicate)
            curve = groups.setdefault(key, {})
            if t in curve:
                raise DuplicateKeyError(
                    f"{path}:{line}: duplicate record for subject="
                    f"{key[0]!r} measure={key[1]!r} replicate={key[2]} t={t!r}"
                )
            curve[t] = value
            n_rows += 1
    if not groups:
        raise EmptyDataError(f"{path}: no records for channel {channel!r}")

    grids = {key: tuple(sorted(ts)) for key, ts in groups.items()}
    first_key = next(iter(grids))
    shared = grids[first_key]
    dropped: tuple[float, ...] = ()
    if grid_policy == "strict":
        for key, g in grids.items():
            if g != shared:
                raise IncompleteCurveError(
                    f"subject={key[0]!r} measure={key[1]!r} replicate={key[2]} "
                    f"does not cover the shared grid"
                )
    else:
        common = set(shared)
        for g in grids.values():
            common &= set(g)
        if len(common) < 2:
            raise IncompleteCurveError(
                "grid intersection across curves has fewer than two points"
            )
        union = set()
        for g in grids.values():
            union |= set(g)
        shared = tuple(sorted(common))
        dropped = tuple(sorted(union - common))

    grid = Grid.from_points(np.asarray(shared))
    subjects = sorted({k[0] for k in groups}, key=_label_key)
    measures = sorted({k[1] for k in groups}, key=_label_key)
    subject_of = {s: i + 1 for i, s in enumerate(subjects)}
    measure_of = {mlab: j + 1 for j, mlab in enumerate(measures)}

    single_replicate = all(
        key[2] == 1 for key in groups
    ) and len({(k[0], k[1]) for k in groups}) == len(groups)

    index = []
    values = np.empty((len(groups), grid.size))
    for row, key in enumerate(sorted(groups, key=lambda k: (
        subject_of[k[0]], measure_of[k[1]], k[2]
    ))):
        curve = groups[key]
        try:
            values[row] = [curve[t] for t in shared]
        except KeyError:
            raise IncompleteCurveError(
                f"subject={key[0]!r} measure={key[1]!r} replicate={key[2]} "
                f"does not cover the shared grid"
            ) from None
        index.append(
            NestedIndex(
                subject_of[key[0]],
                measure_of[key[1]],
                None if single_replicate else key[2],
            )
        )

    curves = CurveSet(
        grid, tuple(index), values, tuple(subjects), tuple(measures)
    )
    counts: dict[str, dict[str, int]] = {}
    for key in groups:
        counts.setdefault(key[0], {}).setdefault(key[1], 0)
        counts[key[0]][key[1]] += 1
    report = IngestReport(
        n_rows=n_rows,
        n_curves=len(groups),
        subjects=tuple(subjects),
        measures=tuple(measures),
        counts=counts,
        balanced=curves.is_balanced(),
        dropped_points=dropped,
    )
    return curves, report


def write_long_csv(X: CurveSet, path: Union[str, Path], channel: str) -> None:
    """Write a CurveSet as long-format CSV (rows sorted canonically)."""
    path = Path(path)
    ordered = X.sorted()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LONG_COLUMNS)
        for ix, row in ordered:
            subject = ordered.subject_labels[ix.subject - 1]
            measure = ordered.measure_labels[ix.measure - 1]
            replicate = 1 if ix.replicate is None else ix.replicate
            for t, v in zip(ordered.grid.points, row):
                writer.writerow(
                    [subject, measure, replicate, _fmt(t), _fmt(v), channel]
                )


def _write_table(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_json(path: Union[str, Path], payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2))
        fh.write("\n")


def read_json(path: Union[str, Path]) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _eigen_rows(level: int, eig: EigenSystem):
    for a, lam in enumerate(eig.eigenvalues, start=1):
        yield [level, a, _fmt(lam)]


def _score_header(level: int, k: int) -> list[str]:
    keys = [["subject"], ["subject", "measure"], ["subject", "measure", "replicate"]]
    return keys[level - 1] + [f"score_{a}" for a in range(1, k + 1)]


def write_fit(
    fit: Union[MultilevelFit, FpcaFit],
    out_dir: Union[str, Path],
    extra_manifest: dict | None = None,
) -> Path:
    """Write a fit as a directory of CSV files plus manifest.json.

    Files: mean.csv (t, value, w), measure_means.csv, one
    eigenfunctions_level{l}.csv per level (header only when that level kept
    zero components), eigenvalues.csv, one scores_level{l}.csv per level,
    noise.json, manifest.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(fit, FpcaFit):
        return _write_fpca_fit(fit, out, extra_manifest)

    grid = fit.grid
    _write_table(
        out / "mean.csv",
        ["t", "value", "w"],
        (
            [_fmt(t), _fmt(v), _fmt(w)]
            for t, v, w in zip(grid.points, fit.global_mean.values, grid.weights)
        ),
    )
    header = ["t"] + [f"m_{lab}" for lab in fit.measure_labels[: len(fit.measure_effects)]]
    effect_cols = [eff.values for eff in fit.measure_effects]
    _write_table(
        out / "measure_means.csv",
        header,
        (
            [_fmt(t)] + [_fmt(col[s]) for col in effect_cols]
            for s, t in enumerate(grid.points)
        ),
    )
    eigen_rows = []
    for level, eig in enumerate(fit.level_eig, start=1):
        eigen_rows.extend(_eigen_rows(level, eig))
        k = eig.n_components
        ef_header = ["t"] + [f"ef_{a}" for a in range(1, k + 1)]
        rows = (
            (
                [_fmt(t)] + [_fmt(eig.functions[s, a]) for a in range(k)]
                for s, t in enumerate(grid.points)
            )
            if k
            else ()
        )
        _write_table(out / f"eigenfunctions_level{level}.csv", ef_header, rows)
    _write_table(out / "eigenvalues.csv", ["level", "component", "eigenvalue"], eigen_rows)

    for level, (scores, units) in enumerate(zip(fit.scores, fit.units), start=1):
        rows = []
        for unit, score_row in zip(units, scores):
            key = [fit.subject_labels[unit[0] - 1]]
            if level >= 2:
                key.append(fit.measure_labels[unit[1] - 1])
            if level == 3:
                key.append(unit[2])
            rows.append(key + [_fmt(v) for v in score_row])
        _write_table(
            out / f"scores_level{level}.csv",
            _score_header(level, scores.shape[1]),
            rows,
        )

    write_json(out / "noise.json", {"noise_variance": fit.noise_variance})
    manifest = {
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "levels": fit.levels,
        "config": {
            "levels": fit.config.levels,
            "pve": fit.config.pve,
            "smooth": fit.config.smooth,
            "bandwidth": fit.config.bandwidth,
            "noise_bandwidth": fit.config.noise_bandwidth,
            "center_measures": fit.config.center_measures,
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    write_json(out / "manifest.json", manifest)
    return out


def _write_fpca_fit(fit: FpcaFit, out: Path, extra_manifest: dict | None) -> Path:
    grid = fit.mean.grid
    _write_table(
        out / "mean.csv",
        ["t", "value", "w"],
        (
            [_fmt(t), _fmt(v), _fmt(w)]
            for t, v, w in zip(grid.points, fit.mean.values, grid.weights)
        ),
    )
    k = fit.eig.n_components
    ef_header = ["t"] + [f"ef_{a}" for a in range(1, k + 1)]
    rows = (
        (
            [_fmt(t)] + [_fmt(fit.eig.functions[s, a]) for a in range(k)]
            for s, t in enumerate(grid.points)
        )
        if k
        else ()
    )
    _write_table(out / "eigenfunctions_level1.csv", ef_header, rows)
    _write_table(
        out / "eigenvalues.csv",
        ["level", "component", "eigenvalue"],
        _eigen_rows(1, fit.eig),
    )
    _write_table(
        out / "scores_level1.csv",
        _score_header(1, k),
        (
            [str(i + 1)] + [_fmt(v) for v in row]
            for i, row in enumerate(fit.scores)
        ),
    )
    write_json(out / "noise.json", {"noise_variance": fit.noise_variance})
    manifest = {
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "levels": 1,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    write_json(out / "manifest.json", manifest)
    return out


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise ParseError(f"missing fit file: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        return header, [row for row in reader]


def read_fit(fit_dir: Union[str, Path]) -> Union[MultilevelFit, FpcaFit]:
    """Load a fit directory written by write_fit."""
    d = Path(fit_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ParseError(f"missing fit file: {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ParseError(
            f"{d}: unsupported format version {manifest.get('format_version')!r}"
        )
    if "levels" not in manifest:
        raise ParseError(f"{d}: manifest has no 'levels' field; not a fit directory")
    levels = int(manifest["levels"])
    header, rows = _read_table(d / "mean.csv")
    if header != ["t", "value", "w"]:
        raise ParseError(f"{d}/mean.csv: unexpected header {header}")
    points = np.array([float(r[0]) for r in rows])
    mean_values = np.array([float(r[1]) for r in rows])
    weights = np.array([float(r[2]) for r in rows])
    grid = Grid(points, weights)
    noise = float(read_json(d / "noise.json")["noise_variance"])

    eig_header, eig_rows = _read_table(d / "eigenvalues.csv")
    eigenvalues: dict[int, list[float]] = {}
    for row in eig_rows:
        eigenvalues.setdefault(int(row[0]), []).append(float(row[2]))

    level_eigs = []
    for level in range(1, levels + 1):
        ef_header, ef_rows = _read_table(d / f"eigenfunctions_level{level}.csv")
        k = len(ef_header) - 1
        lam = np.array(eigenvalues.get(level, []), dtype=float)
        if lam.size != k:
            raise ParseError(
                f"{d}: level {level} has {lam.size} eigenvalues but "
                f"{k} eigenfunction columns"
            )
        if k:
            funcs = np.array(
                [[float(v) for v in row[1:]] for row in ef_rows], dtype=float
            )
        else:
            funcs = np.zeros((grid.size, 0))
        total = lam.sum()
        pve = np.cumsum(lam) / total if total > 0 else np.zeros_like(lam)
        level_eigs.append(EigenSystem(grid, lam, funcs, pve))

    if levels == 1:
        s_header, s_rows = _read_table(d / "scores_level1.csv")
        scores = np.array(
            [[float(v) for v in row[1:]] for row in s_rows], dtype=float
        ).reshape(len(s_rows), -1)
        return FpcaFit(
            mean=Curve(grid, mean_values),
            eig=level_eigs[0],
            scores=scores,
            noise_variance=noise,
        )

    mm_header, mm_rows = _read_table(d / "measure_means.csv")
    measure_labels_mm = tuple(h[2:] for h in mm_header[1:])
    effects = tuple(
        Curve(grid, np.array([float(row[1 + j]) for row in mm_rows]))
        for j in range(len(measure_labels_mm))
    )

    scores = []
    units = []
    subject_labels: list[str] = []
    measure_labels: list[str] = []
    for level in range(1, levels + 1):
        s_header, s_rows = _read_table(d / f"scores_level{level}.csv")
        n_keys = level
        mat = np.array(
            [[float(v) for v in row[n_keys:]] for row in s_rows], dtype=float
        ).reshape(len(s_rows), -1)
        scores.append(mat)
        if level == 1:
            subject_labels = [row[0] for row in s_rows]
            units.append(tuple((i + 1,) for i in range(len(s_rows))))
        else:
            sub_of = {lab: i + 1 for i, lab in enumerate(subject_labels)}
            if level == 2:
                seen: list[str] = []
                for row in s_rows:
                    if row[1] not in seen:
                        seen.append(row[1])
                measure_labels = seen
            meas_of = {lab: j + 1 for j, lab in enumerate(measure_labels)}
            if level == 2:
                units.append(
                    tuple((sub_of[r[0]], meas_of[r[1]]) for r in s_rows)
                )
            else:
                units.append(
                    tuple(
                        (sub_of[r[0]], meas_of[r[1]], int(r[2])) for r in s_rows
                    )
                )

    config_data = manifest.get("config", {})
    defaults = FitConfig()
    config = FitConfig(
        levels=int(config_data.get("levels", levels)),
        pve=float(config_data.get("pve", defaults.pve)),
        smooth=bool(config_data.get("smooth", defaults.smooth)),
        bandwidth=float(config_data.get("bandwidth", defaults.bandwidth)),
        noise_bandwidth=float(
            config_data.get("noise_bandwidth", defaults.noise_bandwidth)
        ),
        center_measures=bool(
            config_data.get("center_measures", defaults.center_measures)
        ),
    )
    return MultilevelFit(
        grid=grid,
        levels=levels,
        global_mean=Curve(grid, mean_values),
        measure_effects=effects,
        level_eig=tuple(level_eigs),
        scores=tuple(scores),
        units=tuple(units),
        noise_variance=noise,
        subject_labels=tuple(subject_labels),
        measure_labels=tuple(measure_labels),
        config=config,
    )
