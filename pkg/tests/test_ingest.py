"""Long CSV ingestion and fit-directory round trips."""

import numpy as np
import pytest

import mfda
from mfda.core import CurveSet
from mfda.errors import (
    DuplicateKeyError,
    EmptyDataError,
    IncompleteCurveError,
    ParseError,
)
from mfda.fpca import fit_fpca
from mfda.ingest import (
    read_fit,
    read_long_csv,
    write_fit,
    write_long_csv,
)
from mfda.mfpca import FitConfig, fit_nested
from mfda.simkl import generate

from .conftest import n2_spec, n3_spec


TINY_CSV = """subject,measure,replicate,t,value,channel
s1,HIIT1,1,0.0,1.5,knee_x
s1,HIIT1,1,0.5,2.5,knee_x
s1,HIIT1,1,1.0,3.5,knee_x
s1,HIIT1,1,0.0,9.9,knee_y
s1,HIIT1,1,0.5,9.9,knee_y
s1,HIIT1,1,1.0,9.9,knee_y
"""


class TestReadLongCsv:
    def test_single_curve(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text(TINY_CSV)
        curves, report = read_long_csv(path, channel="knee_x")
        assert len(curves) == 1
        np.testing.assert_array_equal(curves.values[0], [1.5, 2.5, 3.5])
        np.testing.assert_array_equal(curves.grid.points, [0.0, 0.5, 1.0])
        assert report.n_curves == 1
        assert report.subjects == ("s1",)
        assert report.measures == ("HIIT1",)

    def test_channel_filtering(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text(TINY_CSV)
        curves, _ = read_long_csv(path, channel="knee_y")
        np.testing.assert_array_equal(curves.values[0], [9.9, 9.9, 9.9])

    def test_unknown_channel(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text(TINY_CSV)
        with pytest.raises(EmptyDataError):
            read_long_csv(path, channel="hip_z")

    def test_duplicate_cites_line(self, tmp_path):
        path = tmp_path / "dup.csv"
        path.write_text(
            "subject,measure,replicate,t,value,channel\n"
            "a,m,1,0.0,1.0,c\n"
            "a,m,1,0.5,1.0,c\n"
            "a,m,1,0.0,2.0,c\n"
        )
        with pytest.raises(DuplicateKeyError) as err:
            read_long_csv(path, channel="c")
        assert ":4:" in str(err.value)

    def test_malformed_row_cites_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "subject,measure,replicate,t,value,channel\n"
            "a,m,1,0.0,1.0,c\n"
            "a,m,1,oops,1.0,c\n"
        )
        with pytest.raises(ParseError) as err:
            read_long_csv(path, channel="c")
        assert ":3:" in str(err.value)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "head.csv"
        path.write_text("subject,t,value\n")
        with pytest.raises(ParseError):
            read_long_csv(path, channel="c")

    def test_strict_rejects_grid_mismatch(self, tmp_path):
        path = tmp_path / "mismatch.csv"
        path.write_text(
            "subject,measure,replicate,t,value,channel\n"
            "a,m,1,0.0,1.0,c\n"
            "a,m,1,1.0,1.0,c\n"
            "b,m,1,0.0,1.0,c\n"
            "b,m,1,0.5,1.0,c\n"
            "b,m,1,1.0,1.0,c\n"
        )
        with pytest.raises(IncompleteCurveError):
            read_long_csv(path, channel="c", grid_policy="strict")
        curves, report = read_long_csv(path, channel="c", grid_policy="intersect")
        np.testing.assert_array_equal(curves.grid.points, [0.0, 1.0])
        assert report.dropped_points == (0.5,)


class TestLongCsvRoundTrip:
    def test_two_level_values_and_index(self, tmp_path):
        X, _ = generate(n2_spec(7, n=4, J=2, m=21))
        path = tmp_path / "rt.csv"
        write_long_csv(X, path, channel="sim")
        back, report = read_long_csv(path, channel="sim")
        assert back.index == X.index
        assert np.max(np.abs(back.values - X.values)) < 1e-12
        assert np.max(np.abs(back.grid.points - X.grid.points)) < 1e-12
        assert report.balanced

    def test_three_level_round_trip(self, tmp_path):
        X, _ = generate(n3_spec(8, n=3, J=2, K_rep=3, m=11))
        path = tmp_path / "rt3.csv"
        write_long_csv(X, path, channel="sim")
        back, _ = read_long_csv(path, channel="sim")
        assert back.index == X.index
        assert np.max(np.abs(back.values - X.values)) < 1e-12

    def test_file_level_round_trip(self, tmp_path):
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        X, _ = generate(n2_spec(9, n=3, J=2, m=7))
        write_long_csv(X, first, channel="sim")
        back, _ = read_long_csv(first, channel="sim")
        write_long_csv(back, second, channel="sim")
        assert first.read_bytes() == second.read_bytes()

    def test_deterministic_bytes(self, tmp_path):
        X, _ = generate(n2_spec(10, n=3, J=2, m=7))
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        write_long_csv(X, a, channel="sim")
        write_long_csv(X, b, channel="sim")
        assert a.read_bytes() == b.read_bytes()


def fits_equal(a, b) -> None:
    assert a.levels == b.levels
    assert a.noise_variance == pytest.approx(b.noise_variance, abs=1e-12)
    np.testing.assert_allclose(
        a.global_mean.values, b.global_mean.values, atol=1e-12
    )
    assert len(a.measure_effects) == len(b.measure_effects)
    for ea, eb in zip(a.measure_effects, b.measure_effects):
        np.testing.assert_allclose(ea.values, eb.values, atol=1e-12)
    for ea, eb in zip(a.level_eig, b.level_eig):
        np.testing.assert_allclose(ea.eigenvalues, eb.eigenvalues, atol=1e-12)
        np.testing.assert_allclose(ea.functions, eb.functions, atol=1e-12)
    for sa, sb in zip(a.scores, b.scores):
        np.testing.assert_allclose(sa, sb, atol=1e-12)
    assert a.units == b.units
    assert a.subject_labels == b.subject_labels
    assert a.measure_labels == b.measure_labels


class TestFitRoundTrip:
    def test_two_level(self, tmp_path):
        X, _ = generate(n2_spec(11, n=10, J=2, m=21))
        fit = fit_nested(X, FitConfig(levels=2))
        out = tmp_path / "fit"
        write_fit(fit, out)
        back = read_fit(out)
        fits_equal(fit, back)
        assert back.config == fit.config

    def test_three_level(self, tmp_path):
        X, _ = generate(n3_spec(12, n=4, J=2, K_rep=3, m=11))
        fit = fit_nested(X, FitConfig(levels=3, pve=0.9))
        out = tmp_path / "fit3"
        write_fit(fit, out)
        fits_equal(fit, read_fit(out))

    def test_fpca_fit(self, tmp_path):
        from mfda.core import Grid, NestedIndex

        rng = np.random.default_rng(5)
        grid = Grid.uniform(21)
        index = tuple(NestedIndex(i + 1, 1) for i in range(20))
        X = CurveSet(grid, index, rng.normal(size=(20, 21)))
        fit = fit_fpca(X, pve=0.9)
        out = tmp_path / "fpca"
        write_fit(fit, out)
        back = read_fit(out)
        np.testing.assert_allclose(back.mean.values, fit.mean.values, atol=1e-12)
        np.testing.assert_allclose(
            back.eig.eigenvalues, fit.eig.eigenvalues, atol=1e-12
        )
        np.testing.assert_allclose(back.scores, fit.scores, atol=1e-12)

    def test_zero_component_level_header_only(self, tmp_path):
        X, _ = generate(n2_spec(13, n=8, J=2, m=11, lam2=(0.0,), noise=0.0))
        fit = fit_nested(X, FitConfig(levels=2, pve=0.95))
        assert fit.retained[1] == 0
        out = tmp_path / "fit0"
        write_fit(fit, out)
        content = (out / "eigenfunctions_level2.csv").read_text()
        assert content == "t\n"
        back = read_fit(out)
        assert back.level_eig[1].n_components == 0
        assert back.scores[1].shape == (16, 0)

    def test_manifest_fields(self, tmp_path):
        X, _ = generate(n2_spec(14, n=4, J=2, m=7))
        fit = fit_nested(X, FitConfig(levels=2))
        out = tmp_path / "fit"
        write_fit(fit, out)
        import json

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["format_version"] == "mfda-v1"
        assert manifest["library_version"] == mfda.__version__
        assert manifest["levels"] == 2

    def test_deterministic_bytes(self, tmp_path):
        X, _ = generate(n2_spec(15, n=4, J=2, m=7))
        fit = fit_nested(X, FitConfig(levels=2))
        write_fit(fit, tmp_path / "a")
        write_fit(fit, tmp_path / "b")
        for name in (
            "mean.csv",
            "measure_means.csv",
            "eigenvalues.csv",
            "eigenfunctions_level1.csv",
            "eigenfunctions_level2.csv",
            "scores_level1.csv",
            "scores_level2.csv",
            "noise.json",
            "manifest.json",
        ):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name

    def test_missing_file_is_parse_error(self, tmp_path):
        X, _ = generate(n2_spec(16, n=4, J=2, m=7))
        fit = fit_nested(X, FitConfig(levels=2))
        out = tmp_path / "fit"
        write_fit(fit, out)
        (out / "eigenvalues.csv").unlink()
        with pytest.raises(ParseError):
            read_fit(out)
