import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dartkit.fields import (CHANNELS, Field2D, Grid, ManifestError, ManifestRow, PredictorStack, SampleRecord,
                            apply_norm, compute_norm_stats, invert_norm, ivt_magnitude, read_manifest,
                            read_sample, regrid_bicubic, regrid_bilinear, write_manifest, write_sample)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def field(v, units="dimensionless", **kw):
    v = np.asarray(v, dtype=np.float64)
    return Field2D(v, Grid(*v.shape, **kw), units)


# -- types ----------------------------------------------------------------------

def test_grid_bounds_validated():
    with pytest.raises(ValueError):
        Grid(4, 4, lat_min=10.0, lat_max=5.0)


def test_kelvin_band_enforced():
    with pytest.raises(ValueError, match="plausibility"):
        field([[100.0]], "kelvin")
    field([[150.0, 350.0]], "kelvin")


def test_predictor_stack_canonical_order():
    g = Grid(2, 2)
    with pytest.raises(ValueError, match="canonical"):
        PredictorStack(("T850", "T500"), np.zeros((2, 2, 2)), g)
    s = PredictorStack(CHANNELS, np.arange(20.0).reshape(5, 2, 2), g)
    assert s.select(("W500", "IVT")).channel_names == ("IVT", "W500")


def test_sample_record_grid_mismatch():
    with pytest.raises(ValueError):
        SampleRecord("a", "2015-01-01T00:00:00", PredictorStack(("T500",), np.zeros((1, 2, 2)), Grid(2, 2)),
                     Field2D(np.full((3, 3), 250.0), Grid(3, 3)))


# -- IVT ------------------------------------------------------------------------

def test_ivt_three_four_five():
    out = ivt_magnitude(field(np.full((3, 3), 3.0), "kg_m1_s1"), field(np.full((3, 3), 4.0), "kg_m1_s1"))
    np.testing.assert_array_equal(out.values, 5.0)
    assert out.units == "kg_m1_s1"
    z = ivt_magnitude(field(np.zeros((2, 2))), field(np.zeros((2, 2))))
    assert not z.values.any()


@given(arrays(np.float64, (4, 5), elements=finite), arrays(np.float64, (4, 5), elements=finite))
def test_ivt_pythagorean_and_sign_invariant(e, n):
    out = ivt_magnitude(field(e), field(n)).values.astype(np.float64)
    e32, n32 = e.astype(np.float32).astype(np.float64), n.astype(np.float32).astype(np.float64)
    np.testing.assert_allclose(out ** 2, e32 ** 2 + n32 ** 2, rtol=1e-6, atol=1e-6)
    flipped = ivt_magnitude(field(-e), field(-n)).values
    np.testing.assert_array_equal(out, flipped)


def test_ivt_grid_mismatch():
    with pytest.raises(ValueError, match="grid"):
        ivt_magnitude(field(np.zeros((2, 2))), field(np.zeros((3, 3))))


# -- regridding ------------------------------------------------------------------

def test_bilinear_centre_of_two_by_two():
    src = Field2D(np.array([[0.0, 1.0], [2.0, 3.0]]), Grid(2, 2, 0.0, 2.0, 0.0, 2.0), "dimensionless")
    # a single destination cell centred on (1, 1) sits between all four nodes
    out = regrid_bilinear(src, Grid(1, 1, 0.0, 2.0, 0.0, 2.0))
    assert out.values.item() == pytest.approx(1.5)


@settings(max_examples=30)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 20), st.integers(1, 20), finite)
def test_regrid_constant_reproduced(h, w, dh, dw, c):
    src = field(np.full((h, w), c))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = regrid_bilinear(src, Grid(dh, dw))
    np.testing.assert_allclose(out.values, np.float32(c), rtol=1e-6)
    if h >= 4 and w >= 4:
        np.testing.assert_allclose(regrid_bicubic(src, Grid(dh, dw)).values, np.float32(c), rtol=1e-5, atol=1e-4)


@given(arrays(np.float64, (6, 7), elements=finite))
def test_identity_grid_reproduces_nodes(v):
    src = field(v)
    np.testing.assert_allclose(regrid_bilinear(src, src.grid).values, src.values, atol=1e-6 * (1 + np.abs(v).max()))
    np.testing.assert_allclose(regrid_bicubic(src, src.grid).values, src.values, atol=1e-6 * (1 + np.abs(v).max()))


@settings(max_examples=30)
@given(arrays(np.float64, (5, 5), elements=finite), st.integers(2, 24))
def test_bilinear_maximum_principle(v, n):
    out = regrid_bilinear(field(v), Grid(n, n)).values
    assert out.min() >= np.float32(v.min()) - 1e-3 and out.max() <= np.float32(v.max()) + 1e-3


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-100, 100), st.integers(8, 40))
def test_bicubic_reproduces_linear_ramp(a, b, c, n):
    src_grid = Grid(8, 8)
    lat, lon = np.meshgrid(src_grid.lat_centers(), src_grid.lon_centers(), indexing="ij")
    src = Field2D(a * lat + b * lon + c, src_grid, "dimensionless")
    dst = Grid(n, n)
    dl, do = np.meshgrid(dst.lat_centers(), dst.lon_centers(), indexing="ij")
    # clamp to the node hull, matching the edge rule
    dl = np.clip(dl, src_grid.lat_centers()[0], src_grid.lat_centers()[-1])
    do = np.clip(do, src_grid.lon_centers()[0], src_grid.lon_centers()[-1])
    np.testing.assert_allclose(regrid_bicubic(src, dst).values, a * dl + b * do + c, atol=2e-3)


def test_bicubic_small_source_rejected():
    with pytest.raises(ValueError, match="4×4"):
        regrid_bicubic(field(np.zeros((3, 5))), Grid(8, 8))


def test_bilinear_degenerate_source_warns():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        out = regrid_bilinear(field(np.array([[1.0, 3.0]])), Grid(4, 4))
    assert out.values.min() >= 1.0 and out.values.max() <= 3.0


# -- normalisation ---------------------------------------------------------------

def _stack(v):
    v = np.asarray(v, dtype=np.float64)
    return PredictorStack(CHANNELS[:v.shape[0]], v, Grid(*v.shape[1:]))


def test_norm_population_convention():
    s = _stack([[[0.0, 2.0]]])
    stats = compute_norm_stats([s])
    assert stats.mean == (1.0,) and stats.std == (1.0,)
    np.testing.assert_array_equal(apply_norm(s, stats).values, [[[-1.0, 1.0]]])


def test_norm_zero_variance_rejected():
    with pytest.raises(ValueError, match="zero-variance"):
        compute_norm_stats([_stack(np.full((1, 2, 2), 5.0))])


@given(arrays(np.float64, (3, 2, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_norm_roundtrip_and_moments(v):
    stacks = [_stack(x) for x in v]
    v32 = np.stack([s.values for s in stacks]).astype(np.float64)
    if np.any(v32.std(axis=(0, 2, 3)) < 1e-2):
        return
    stats = compute_norm_stats(stacks)
    normed = np.stack([apply_norm(s, stats).values for s in stacks]).astype(np.float64)
    np.testing.assert_allclose(normed.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(normed.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
    back = invert_norm(apply_norm(stacks[0], stats), stats)
    np.testing.assert_allclose(back.values, stacks[0].values, atol=1e-5 * (1 + np.abs(v).max()))


# -- persistence -----------------------------------------------------------------

def _record(rng, i=0):
    g = Grid(4, 6, 20.0, 27.0, 88.0, 93.0)
    return SampleRecord(f"s{i:05d}", "2015-06-01T06:00:00", PredictorStack(CHANNELS, rng.normal(size=(5, 4, 6)), g),
                        Field2D(rng.uniform(190, 300, size=(4, 6)), g))


def test_sample_roundtrip_exact(tmp_path):
    rec = _record(np.random.default_rng(0))
    p, t = write_sample(tmp_path, rec)
    back = read_sample(tmp_path, p, t)
    assert (back.id, back.timestamp) == (rec.id, rec.timestamp)
    assert back.target.grid == rec.target.grid
    assert back.predictors.channel_names == rec.predictors.channel_names
    np.testing.assert_array_equal(back.predictors.values, rec.predictors.values)
    np.testing.assert_array_equal(back.target.values, rec.target.values)


def test_manifest_roundtrip_preserves_order(tmp_path):
    rows = [ManifestRow(f"s{i}", f"2015-06-0{i + 1}T00:00:00", f"p{i}", f"t{i}", sp)
            for i, sp in enumerate(["test", "train", "val"])]
    write_manifest(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,timestamp,predictor_path,target_path,split"
    assert read_manifest(tmp_path / "m.csv") == rows


def test_manifest_rejects_unknown_split_and_bad_rows(tmp_path):
    with pytest.raises(ManifestError):
        write_manifest(tmp_path / "m.csv", [ManifestRow("a", "t", "p", "q", "holdout")])
    f = tmp_path / "bad.csv"
    f.write_text("id,timestamp,predictor_path,target_path,split\na,t,p,q,train\nb,t,p,q,holdout\n")
    with pytest.raises(ManifestError, match="line 3"):
        read_manifest(f)
    f.write_text("id,timestamp,predictor_path,target_path,split\na,t,p\n")
    with pytest.raises(ManifestError, match="line 2"):
        read_manifest(f)
