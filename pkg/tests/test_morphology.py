import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage import measure

from morphoskel.morphology import (FRAME_FEATURES, MorphRegressor, SoftMorphRegressor, build_morph_condition_map,
                                   calcium_arclength, circularity, extract_feature_matrix, frame_feature,
                                   frame_features, normalize_features, percentile_bounds, smooth_features,
                                   soft_area_regressor, thickness, volume_features)
from morphoskel.phantom import CalciumSpec, PhantomSpec, generate, generate_corpus, stenosis_profile
from morphoskel.volume import CALCIUM, LUMEN, WALL, MorphFeatureMatrix, SegmentationMap, one_hot

from conftest import disc
from test_edt import brute_force_sq


def arc_slice(shape=(64, 64), centre=(32, 32), r_in=12.0, r_out=17.0, a0=20.0, span=90.0, lumen_r=6):
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    rho = np.hypot(yy - centre[0], xx - centre[1])
    th = np.degrees(np.arctan2(yy - centre[0], xx - centre[1])) % 360
    s = np.zeros(shape, dtype=np.uint8)
    s[rho <= r_out + 5] = WALL
    s[rho <= lumen_r] = LUMEN
    s[(rho > r_in) & (rho <= r_out) & (((th - a0) % 360) <= span)] = CALCIUM
    return s


# --- areas, centroid ------------------------------------------------------------

def test_lumen_disc_area_and_centroid():
    s = np.where(disc((64, 64), (31.5, 31.5), 20), LUMEN, 0)
    f = frame_features(s)
    assert f.lumen_area == np.count_nonzero(disc((64, 64), (31.5, 31.5), 20))
    assert abs(f.lumen_area - math.pi * 400) / (math.pi * 400) < 0.05
    assert f.plaque_centroid_dist == pytest.approx(0.0, abs=1e-12)
    assert f.vessel_area == 0 and f.calcium_area == 0


def test_empty_slice_is_all_zero():
    f = frame_features(np.zeros((16, 16), dtype=np.uint8))
    assert all(v == 0 for v in f.as_vector())


@pytest.mark.parametrize("r", [8, 10, 14, 20])
def test_disc_area_within_five_percent(r):
    a = frame_feature(np.where(disc((64, 64), (31.3, 32.2), r), LUMEN, 0), "lumen_area")
    assert abs(a - math.pi * r * r) / (math.pi * r * r) < 0.05


def test_area_classes():
    s = arc_slice()
    f = frame_features(s)
    assert f.lumen_area == (s == LUMEN).sum()
    assert f.vessel_area == ((s == WALL) | (s == CALCIUM)).sum()
    assert f.plaque_area == (s > 0).sum()
    assert f.calcium_area == (s == CALCIUM).sum()


def test_centroid_shift_equals_translation():
    s = np.where(disc((64, 64), (31.5, 31.5), 8), WALL, 0)
    shifted = np.roll(np.roll(s, 3, axis=0), 4, axis=1)
    assert frame_feature(shifted, "plaque_centroid_dist") == pytest.approx(5.0)


# --- circularity ------------------------------------------------------------------

def contour_circularity(mask):
    """Independent oracle: perimeter from marching-squares contours."""
    contours = measure.find_contours(np.pad(mask, 1).astype(float), 0.5)
    p = sum(np.linalg.norm(np.diff(c, axis=0), axis=1).sum() for c in contours)
    return 4 * math.pi * mask.sum() / p ** 2


@pytest.mark.parametrize("r", [6, 10, 20])
def test_disc_circularity_near_one(r):
    m = disc((64, 64), (31.5, 32), r)
    assert abs(circularity(m) - 1) < 0.15
    assert abs(contour_circularity(m) - 1) < 0.15


def test_elongated_shape_less_circular():
    m = np.zeros((64, 64), dtype=bool)
    m[30:34, 5:60] = True
    assert circularity(m) < 0.4


# --- thickness --------------------------------------------------------------------

def test_calcium_disc_thickness():
    s = np.where(disc((64, 64), (32, 32), 10), CALCIUM, 0)
    assert abs(frame_feature(s, "calcium_thickness") - 20) <= 1


@pytest.mark.parametrize("w", [3, 5, 8])
def test_band_thickness_is_band_width(w):
    m = np.zeros((32, 32), dtype=bool)
    m[10:10 + w, 4:28] = True
    assert thickness(m) == pytest.approx(w, abs=0.5)


def test_thickness_without_supersampling_matches_brute_force_edt(rng):
    for _ in range(5):
        m = rng.random((20, 20)) < 0.6
        ref = 2 * math.sqrt(brute_force_sq(np.pad(m, 1)).max())
        assert thickness(m, supersample=1) == pytest.approx(ref)


@pytest.mark.parametrize("band", [(12, 16), (10, 15), (13, 20)])
def test_arc_band_thickness_within_one_px(band):
    s = arc_slice(r_in=band[0], r_out=band[1], span=90)
    assert abs(frame_feature(s, "calcium_thickness") - (band[1] - band[0])) <= 1


def test_multi_component_thickness_is_max():
    m = np.zeros((40, 40), dtype=bool)
    m[5:8, 5:30] = True
    m[20:27, 5:30] = True
    assert thickness(m) == pytest.approx(7, abs=0.5)


# --- arclength --------------------------------------------------------------------

@pytest.mark.parametrize("a0", [0.0, 17.0, 33.3, 100.0, 215.0, 300.0])
def test_quarter_arc(a0):
    assert abs(calcium_arclength(arc_slice(a0=a0, span=90)) - 90) <= 2


@pytest.mark.parametrize("span", [45, 135, 200, 270])
def test_arc_spans(span):
    assert abs(calcium_arclength(arc_slice(a0=40, span=span)) - span) <= 2


def test_full_ring_and_empty():
    assert calcium_arclength(arc_slice(span=360)) == 360
    assert calcium_arclength(arc_slice(span=0, r_in=40, r_out=41)) == 0


def test_arclength_wraps_through_zero():
    assert abs(calcium_arclength(arc_slice(a0=320, span=90)) - 90) <= 2


def test_largest_single_run():
    s = arc_slice(a0=10, span=60)
    s2 = arc_slice(a0=150, span=100)
    s[s2 == CALCIUM] = CALCIUM
    assert abs(calcium_arclength(s) - 100) <= 2


def test_arclength_centre_is_lumen_centroid():
    # lumen off-centre: arc measured about the lumen, not the image centre
    s = arc_slice(centre=(28, 36), a0=45, span=90)
    assert abs(calcium_arclength(s) - 90) <= 2


# --- invariances --------------------------------------------------------------------

def test_translation_invariance():
    s = arc_slice(a0=30, span=120)
    t = np.roll(np.roll(s, 2, axis=0), -3, axis=1)
    for name in ("lumen_area", "vessel_area", "plaque_area", "calcium_area", "calcium_thickness",
                 "calcium_arclength"):
        assert frame_feature(t, name) == pytest.approx(frame_feature(s, name))


def test_rotation_invariance():
    s = arc_slice(centre=(31.5, 31.5), a0=30, span=120)
    r = np.rot90(s)
    for name in FRAME_FEATURES:
        a, b = frame_feature(s, name), frame_feature(r, name)
        if name == "plaque_circularity":
            assert b == pytest.approx(a, rel=0.02)
        else:
            assert b == pytest.approx(a, abs=1e-9)


# --- volumes ----------------------------------------------------------------------------

def test_uniform_tube_stenosis_one_and_no_calcium():
    seg = generate(PhantomSpec(shape=(48, 48, 16), radius=8, wall=5))
    v = volume_features(seg)
    assert v.stenosis_ratio == 1.0
    assert v.calcium_volume == v.calcium_length == v.max_calcium_thickness == v.mean_calcium_arclength == 0
    assert v.min_plaque_circularity <= v.mean_plaque_circularity


def test_half_area_stenosis():
    prof = stenosis_profile(64, 14.0, 0.5)
    seg = generate(PhantomSpec(shape=(64, 64, 64), radius=tuple(prof), wall=5))
    assert volume_features(seg).stenosis_ratio == pytest.approx(0.5, abs=0.02)


def test_vessel_burden_at_min_site():
    prof = stenosis_profile(32, 10.0, 0.6)
    seg = generate(PhantomSpec(shape=(48, 48, 32), radius=tuple(prof), wall=5))
    lumen = (seg.labels == LUMEN).sum(axis=(0, 1))
    vessel = (seg.labels == WALL).sum(axis=(0, 1))
    site = int(np.argmin(lumen))
    assert volume_features(seg).vessel_burden == pytest.approx(vessel[site] / lumen[site])


def test_calcium_summaries():
    labels = np.stack([arc_slice(span=90)] * 3 + [arc_slice(span=0, r_in=40, r_out=41)] * 2, axis=2)
    v = volume_features(SegmentationMap(labels))
    assert v.calcium_length == 3
    assert v.max_calcium_arclength == pytest.approx(v.mean_calcium_arclength)
    assert abs(v.mean_calcium_arclength - 90) <= 2


# --- feature matrix --------------------------------------------------------------------

def test_feature_matrix_rows_match_frame_loop():
    seg = generate(PhantomSpec(shape=(48, 48, 12), radius=6, wall=10,
                               calcium=(CalciumSpec((2, 9), (10, 140)),)))
    names = ("lumen_area", "calcium_area", "calcium_arclength")
    m = extract_feature_matrix(seg, names)
    for d in range(12):
        f = frame_features(seg.labels[:, :, d])
        assert m.features[:, d].tolist() == [getattr(f, n) for n in names]


def test_tube_lumen_row_constant():
    seg = generate(PhantomSpec(shape=(32, 32, 10), radius=5, wall=4))
    row = extract_feature_matrix(seg, ["lumen_area"]).features[0]
    assert np.all(row == row[0])


def test_unknown_feature():
    seg = SegmentationMap(np.zeros((4, 4, 4), dtype=np.uint8))
    with pytest.raises(KeyError):
        extract_feature_matrix(seg, ["foo"])


# --- smoothing ----------------------------------------------------------------------------

def sg_oracle(y, window, order):
    """Least-squares polynomial fit per window; the edges use the first/last full window."""
    n, h = len(y), window // 2
    out = np.empty(n)
    for i in range(n):
        lo = min(max(i - h, 0), n - window)
        t = np.arange(lo, lo + window)
        coef = np.polyfit(t - i, y[lo:lo + window], order)
        out[i] = coef[-1]
    return out


def mtx(rows):
    rows = np.atleast_2d(rows)
    return MorphFeatureMatrix(rows, ("lumen_area", "calcium_area")[:len(rows)])


@pytest.mark.parametrize("poly", [lambda t: 3.0 + 0 * t, lambda t: 2 * t - 5, lambda t: 0.01 * t ** 2 - t + 4])
def test_polynomials_pass_through(poly):
    t = np.arange(64, dtype=float)
    out = smooth_features(mtx(poly(t))).features[0]
    assert np.max(np.abs(out - poly(t))) < 1e-9


def test_noisy_sine_matches_least_squares(rng):
    t = np.arange(80)
    y = np.sin(t / 7) + 0.3 * rng.standard_normal(80)
    assert np.allclose(smooth_features(mtx(y)).features[0], sg_oracle(y, 21, 2), atol=1e-10)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_smoothing_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 30)), r.standard_normal((2, 30))
    lhs = smooth_features(mtx(a * x + b * y)).features
    rhs = a * smooth_features(mtx(x)).features + b * smooth_features(mtx(y)).features
    assert np.allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize("window,order", [(20, 2), (2, 2), (41, 2)])
def test_bad_windows(window, order):
    with pytest.raises(ValueError):
        smooth_features(mtx(np.zeros(30)), window, order)


# --- normalization -------------------------------------------------------------------------

def test_normalization_endpoints():
    m = MorphFeatureMatrix([[2.0, 10.0, -6.0]], ("lumen_area",))
    out = normalize_features(m, {"lumen_area": (2.0, 10.0)}).features[0]
    assert out.tolist() == [0.0, 1.0, -1.0]
    with pytest.raises(ValueError):
        normalize_features(m, {"lumen_area": (3.0, 3.0)})


def sorted_percentile(values, q):
    v = np.sort(values)
    pos = (len(v) - 1) * q / 100
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def test_percentile_bounds_match_sort_oracle():
    items = generate_corpus(6, seed=5, shape=(48, 48, 24))
    b = percentile_bounds([it.features for it in items])
    for i, n in enumerate(items[0].features.names):
        pooled = np.concatenate([it.features.features[i] for it in items])
        assert b[n][0] == pytest.approx(sorted_percentile(pooled, 2))
        assert b[n][1] == pytest.approx(sorted_percentile(pooled, 98))


# --- conditioning map ------------------------------------------------------------------------

def test_condition_map_constant_and_alternating():
    m = build_morph_condition_map(np.full((1, 16), 0.5), (3, 3, 4))
    assert m.shape == (1, 3, 3, 4) and np.all(m == 0.5)
    alt = np.tile([0.0, 1.0], 8)[None]
    assert np.all(build_morph_condition_map(alt, (2, 2, 4)) == 0.5)


def test_condition_map_block_means(rng):
    rows = rng.random((2, 24))
    m = build_morph_condition_map(rows, (2, 3, 6))
    for f in range(2):
        for j in range(6):
            assert m[f, 1, 2, j] == pytest.approx(rows[f, 4 * j:4 * j + 4].sum() / 4)
    with pytest.raises(ValueError):
        build_morph_condition_map(rows, (2, 3, 5))


# --- regressors --------------------------------------------------------------------------

def test_soft_area_equals_hard_area():
    seg = generate(PhantomSpec(shape=(32, 32, 8), radius=5, wall=4))
    p = one_hot(seg).probs
    assert np.array_equal(soft_area_regressor(p, LUMEN), extract_feature_matrix(seg, ["lumen_area"]).features[0])


def test_uniform_probability_area():
    p = np.full((4, 128, 128, 2), 0.25)
    assert np.all(soft_area_regressor(p, LUMEN) == 4096)


def test_soft_regressor_gradient_matches_finite_differences(rng):
    reg = SoftMorphRegressor(("lumen_area", "vessel_area"), 2, {"lumen_area": (1, 9), "vessel_area": (0, 4)})
    p = rng.random((4, 3, 3, 4))
    g = rng.standard_normal((2, 2))
    an = reg.vjp(p.shape, g)
    h = 1e-3
    for idx in [(2, 0, 0, 0), (1, 2, 1, 3), (3, 1, 2, 2), (0, 0, 0, 1)]:
        e = np.zeros_like(p)
        e[idx] = h
        fd = ((reg(p + e) - reg(p - e)) * g).sum() / (2 * h)
        assert abs(fd - an[idx]) <= 1e-6 * max(1.0, abs(fd))


def test_soft_regressor_rejects_non_area_features():
    with pytest.raises(ValueError):
        SoftMorphRegressor(("calcium_thickness",), 4)


def test_hard_regressor_accepts_scores_and_labels():
    seg = generate(PhantomSpec(shape=(32, 32, 8), radius=5, wall=4))
    reg = MorphRegressor(("lumen_area",), (32, 32, 4), {"lumen_area": (0, 100)})
    a = reg(seg)
    b = reg(one_hot(seg).probs)
    assert np.array_equal(a, b)
    assert a.shape == (1, 32, 32, 4)


def test_arclength_unbiased_over_orientations():
    errs = []
    for a0 in np.arange(0.0, 360.0, 3.7):
        for band in ((12, 17), (10, 15)):
            errs.append(calcium_arclength(arc_slice(a0=a0, span=90, r_in=band[0], r_out=band[1])) - 90)
    errs = np.array(errs)
    assert abs(errs.mean()) < 0.5
    assert np.mean(np.abs(errs) <= 2) > 0.9


@given(st.floats(0, 359), st.floats(10, 300))
def test_arclength_in_range(a0, span):
    v = calcium_arclength(arc_slice(a0=a0, span=span))
    assert 0 <= v <= 360
