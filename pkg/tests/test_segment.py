import numpy as np
import pytest

from namseg import model as M
from namseg import segment as S
from namseg.errors import DegenerateMapError, DomainError, GeometryError, SelectionError
from namseg.nam import Nam

from oracles import icm_brute_force, potts_energy_loops

TOY = M.ModelConfig(input_size=(16, 16), stage_channels=(4, 8), gap_taps=(1,),
                    head_channels=4)


def bump_map(shape, centers_heights, sigma=3.0):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for (cy, cx), height in centers_heights:
        out += height * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return out


def nam_of(arr):
    return Nam(map=np.asarray(arr, dtype=np.float64))


# -- extract_scope ---------------------------------------------------------------

def test_single_bump_scope_contains_peak():
    m = bump_map((24, 24), [((12, 12), 5.0)])
    scope = S.extract_scope(nam_of(m))
    assert scope.mask[12, 12]
    assert scope.area > 1
    assert scope.origin_kind == S.ONE_GAP_C1


def test_two_bumps_scope_covers_only_higher():
    m = bump_map((24, 48), [((12, 12), 5.0), ((12, 36), 3.0)])
    scope = S.extract_scope(nam_of(m))
    assert scope.mask[12, 12]
    ys, xs = np.nonzero(scope.mask)
    assert xs.max() < 24  # nothing in the second bump's half-plane


def test_constant_map_raises():
    with pytest.raises(DegenerateMapError):
        S.extract_scope(nam_of(np.full((8, 8), 3.0)))


def test_scope_is_connected_and_thresholded():
    m = bump_map((32, 32), [((16, 16), 10.0)], sigma=4.0)
    scope = S.extract_scope(nam_of(m), tau=0.5)
    assert np.all(m[scope.mask] >= 5.0 - 1e-12)
    from scipy import ndimage
    _, n = ndimage.label(scope.mask, structure=S.FOUR_CONN)
    assert n == 1


# -- extract_top_scopes -----------------------------------------------------------

def test_top_scopes_two_bumps():
    m = bump_map((24, 48), [((12, 12), 5.0), ((12, 36), 3.0)])
    scopes = S.extract_top_scopes(nam_of(m), 2)
    assert len(scopes) == 2
    assert scopes[0].mask[12, 12]
    assert scopes[1].mask[12, 36]
    assert not (scopes[0].mask & scopes[1].mask).any()


def test_top_scopes_single_bump_returns_one():
    m = bump_map((24, 24), [((12, 12), 5.0)])
    assert len(S.extract_top_scopes(nam_of(m), 2)) == 1


def test_top_scopes_n1_matches_extract_scope():
    m = bump_map((24, 48), [((12, 12), 5.0), ((11, 37), 3.0)])
    one = S.extract_scope(nam_of(m))
    top = S.extract_top_scopes(nam_of(m), 1)
    assert len(top) == 1
    np.testing.assert_array_equal(top[0].mask, one.mask)


def test_top_scopes_bad_n():
    with pytest.raises(DomainError):
        S.extract_top_scopes(nam_of(bump_map((8, 8), [((4, 4), 1.0)])), 0)


# -- icm_segment -------------------------------------------------------------------

def full_scope(shape):
    return S.Scope(mask=np.ones(shape, bool))


def windowed_scope(shape, y0, x0, y1, x1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return S.Scope(mask=m)


def test_icm_beta_zero_equals_nearest_mean_oracle():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(12, 12))
    cfg = S.IcmConfig(phases=4, beta=0.0, window_margin=0)
    res = S.icm_segment(img, full_scope((12, 12)), cfg)
    qs = (2 * np.arange(4) + 1) / 8
    mus0 = np.quantile(img, qs)
    want = np.argmin((img[:, :, None] - mus0[None, None, :]) ** 2, axis=2)
    np.testing.assert_array_equal(res.labels, want)


def test_icm_two_intensity_exact_bilevel():
    img = np.full((3, 3), 10.0)
    img[1:, 1:] = 200.0
    cfg = S.IcmConfig(phases=2, beta=1.0, window_margin=0)
    res = S.icm_segment(img, full_scope((3, 3)), cfg)
    want = (img > 100).astype(int)
    # phase order: mus sorted ascending by construction of quantiles
    np.testing.assert_array_equal(res.labels, want)
    best_e, _ = icm_brute_force(img, res.mus, res.beta)
    assert res.energies[-1] == pytest.approx(best_e)


def test_icm_energy_never_increases():
    rng = np.random.default_rng(1)
    for trial in range(20):
        img = rng.uniform(0, 1, size=(10, 10))
        img[3:7, 3:7] += rng.uniform(0.3, 0.8)
        res = S.icm_segment(img, full_scope((10, 10)),
                            S.IcmConfig(phases=4, window_margin=0))
        diffs = np.diff(res.energies)
        assert np.all(diffs <= 1e-9)


def test_icm_energy_matches_loop_formula():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, size=(6, 6))
    res = S.icm_segment(img, full_scope((6, 6)), S.IcmConfig(phases=3, window_margin=0))
    want = potts_energy_loops(res.labels, img, res.mus, res.beta)
    assert res.energies[-1] == pytest.approx(want, rel=1e-12)


def test_icm_final_energy_vs_brute_force_3x3():
    rng = np.random.default_rng(3)
    for trial in range(15):
        img = rng.uniform(0, 1, size=(3, 3))
        cfg = S.IcmConfig(phases=2, beta=0.05, window_margin=0)
        res = S.icm_segment(img, full_scope((3, 3)), cfg)
        best_e, _ = icm_brute_force(img, res.mus, res.beta)
        assert res.energies[-1] >= best_e - 1e-12


def test_icm_window_geometry():
    img = np.zeros((20, 20))
    img[10, 10] = 1.0
    scope = windowed_scope((20, 20), 9, 9, 12, 12)
    res = S.icm_segment(img, scope, S.IcmConfig(window_margin=3))
    y0, x0, y1, x1 = res.window
    assert (y0, x0, y1, x1) == (6, 6, 15, 15)
    with pytest.raises(GeometryError):
        S.icm_segment(np.zeros((1, 1)), S.Scope(mask=np.ones((1, 1), bool)),
                      S.IcmConfig(window_margin=0))


# -- extract_candidates ------------------------------------------------------------

def _icm_result(labels, window, mus):
    return S.IcmResult(labels=np.asarray(labels), window=window,
                       mus=np.asarray(mus, dtype=float))


def test_one_bright_blob_one_candidate():
    labels = np.zeros((10, 10), int)
    labels[3:6, 3:6] = 1
    res = _icm_result(labels, (0, 0, 10, 10), [0.1, 0.9])
    scope = windowed_scope((10, 10), 2, 2, 8, 8)
    cands = S.extract_candidates(res, scope)
    assert len(cands) == 1
    want = np.zeros((10, 10), bool)
    want[3:6, 3:6] = True
    np.testing.assert_array_equal(cands[0].mask, want)
    assert cands[0].area == 9
    assert cands[0].bbox == (3, 3, 5, 5)


def test_blob_outside_scope_dropped():
    labels = np.zeros((10, 10), int)
    labels[7:10, 7:10] = 1
    res = _icm_result(labels, (0, 0, 10, 10), [0.1, 0.9])
    scope = windowed_scope((10, 10), 0, 0, 4, 4)
    assert S.extract_candidates(res, scope) == []


def test_two_blobs_ordered_by_area():
    labels = np.zeros((12, 12), int)
    labels[1:3, 1:3] = 1           # area 4
    labels[5:9, 5:9] = 1           # area 16
    res = _icm_result(labels, (0, 0, 12, 12), [0.1, 0.9])
    cands = S.extract_candidates(res, windowed_scope((12, 12), 0, 0, 12, 12))
    assert [c.area for c in cands] == [16, 4]


def test_min_area_filter():
    labels = np.zeros((8, 8), int)
    labels[2, 2] = 1               # single pixel: below min_area
    labels[5:7, 5:7] = 1           # area 4
    res = _icm_result(labels, (0, 0, 8, 8), [0.0, 1.0])
    cands = S.extract_candidates(res, windowed_scope((8, 8), 0, 0, 8, 8))
    assert len(cands) == 1
    assert cands[0].area == 4


def test_window_offset_maps_to_image_coords():
    labels = np.zeros((4, 4), int)
    labels[1:3, 1:3] = 1
    res = _icm_result(labels, (10, 20, 14, 24), [0.0, 1.0])
    scope = windowed_scope((32, 32), 10, 20, 14, 24)
    cands = S.extract_candidates(res, scope)
    assert cands[0].bbox == (21, 11, 22, 12)


# -- select_candidate -----------------------------------------------------------------

def _blob_candidate(shape, y0, x0, y1, x1):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return S.Candidate(mask=m)


def test_single_candidate_returned():
    m = M.build(TOY, 0)
    img = np.full((1, 16, 16), 0.2)
    from namseg.nam import compute_nam
    nam_i = compute_nam(m, img)
    scope = windowed_scope((16, 16), 4, 4, 12, 12)
    cand = _blob_candidate((16, 16), 6, 6, 9, 9)
    got = S.select_candidate(m, img, nam_i, scope, [cand], fill=0.2)
    assert got is cand


def test_tie_breaks_to_larger_area():
    m = M.build(TOY, 0)
    m.fc_w.data[:] = 0.0           # zero weights: every residual distance is 0
    img = np.full((1, 16, 16), 0.2)
    from namseg.nam import compute_nam
    nam_i = compute_nam(m, img)
    scope = windowed_scope((16, 16), 0, 0, 16, 16)
    small = _blob_candidate((16, 16), 2, 2, 4, 4)
    big = _blob_candidate((16, 16), 8, 8, 12, 12)
    assert S.select_candidate(m, img, nam_i, scope, [small, big], fill=0.2) is big
    assert S.select_candidate(m, img, nam_i, scope, [big, small], fill=0.2) is big


def test_equal_area_tie_breaks_to_smaller_xmin():
    m = M.build(TOY, 0)
    m.fc_w.data[:] = 0.0
    img = np.full((1, 16, 16), 0.2)
    from namseg.nam import compute_nam
    nam_i = compute_nam(m, img)
    scope = windowed_scope((16, 16), 0, 0, 16, 16)
    left = _blob_candidate((16, 16), 6, 2, 9, 5)
    right = _blob_candidate((16, 16), 6, 10, 9, 13)
    assert S.select_candidate(m, img, nam_i, scope, [right, left], fill=0.2) is left


def test_empty_candidates_raise():
    m = M.build(TOY, 0)
    with pytest.raises(SelectionError):
        S.select_candidate(m, np.zeros((1, 16, 16)), nam_of(np.zeros((16, 16))),
                           windowed_scope((16, 16), 0, 0, 4, 4), [], fill=0.0)


# -- segment_slice ------------------------------------------------------------------------

def _negative_model():
    m = M.build(TOY, 0)
    m.fc_w.data[:] = 0.0
    m.fc_b.data = np.array([5.0, 0.0])   # always votes no_nodule
    return m


def _positive_model():
    m = M.build(TOY, 0)
    m.fc_w.data[:] = 0.0
    m.fc_b.data = np.array([0.0, 5.0])   # always votes nodule; NAM degenerate
    return m


def test_negative_classification_short_circuits():
    res = S.segment_slice(_negative_model(), np.full((1, 16, 16), 0.2))
    assert res.outcome == "no_nodule"
    assert res.masks == []
    assert res.prob < 0.5


def test_positive_with_degenerate_map_fails():
    res = S.segment_slice(_positive_model(), np.full((1, 16, 16), 0.2))
    assert res.outcome == "failed"       # distinct from "no nodule"


def test_pipeline_segments_synthetic_blob(monkeypatch):
    # NAM peaked on a bright blob; pipeline should return that blob's pixels
    rng = np.random.default_rng(7)
    m = _positive_model()
    img = 0.2 + rng.normal(0, 0.02, size=(1, 16, 16))
    img[0, 6:10, 6:10] = 0.9
    fake_nam = nam_of(bump_map((16, 16), [((7, 7), 1.0)], sigma=2.5))
    monkeypatch.setattr(S, "compute_nam", lambda model, image: fake_nam)
    res = S.segment_slice(m, img, cfg=S.PipelineConfig(fill=0.2))
    assert res.outcome == "nodule"
    assert res.scope_origin == S.ONE_GAP_C1
    assert len(res.masks) == 1
    want = np.zeros((16, 16), bool)
    want[6:10, 6:10] = True
    np.testing.assert_array_equal(res.masks[0], want)
    assert res.n_candidates >= 1
    assert res.selected_index >= 0


def test_multi_scope_refinement_and_fallback(monkeypatch):
    m = _positive_model()
    multi = _positive_model()
    img = np.full((1, 16, 16), 0.2)
    img[0, 6:10, 6:10] = 0.9
    one_map = nam_of(bump_map((16, 16), [((7, 7), 1.0)], sigma=4.0))
    tight_map = nam_of(bump_map((16, 16), [((7, 7), 1.0)], sigma=1.5))
    away_map = nam_of(bump_map((16, 16), [((1, 14), 1.0)], sigma=1.0))

    def fake_nam(model, image):
        return one_map if model is m else fake_nam.multi_map

    monkeypatch.setattr(S, "compute_nam", fake_nam)
    fake_nam.multi_map = tight_map
    res = S.segment_slice(m, img, multi_gap_model=multi, cfg=S.PipelineConfig(fill=0.2))
    assert res.scope_origin == S.MULTI_GAP_CMULTI

    # multi-GAP peak outside C1: scope falls back to C1
    fake_nam.multi_map = away_map
    res2 = S.segment_slice(m, img, multi_gap_model=multi, cfg=S.PipelineConfig(fill=0.2))
    assert res2.scope_origin == S.ONE_GAP_C1


def test_coarse_only_picks_largest(monkeypatch):
    rng = np.random.default_rng(8)
    m = _positive_model()
    img = 0.2 + rng.normal(0, 0.02, size=(1, 16, 16))
    img[0, 2:4, 2:4] = 0.9         # small blob
    img[0, 8:13, 8:13] = 0.9       # large blob
    wide = nam_of(bump_map((16, 16), [((8, 8), 1.0)], sigma=8.0))
    monkeypatch.setattr(S, "compute_nam", lambda model, image: wide)
    res = S.segment_slice(m, img, cfg=S.PipelineConfig(fill=0.2, coarse_only=True,
                                                       icm=S.IcmConfig(window_margin=16)))
    assert res.outcome == "nodule"
    assert res.masks[0][10, 10] and not res.masks[0][2, 2]


def test_two_nodule_mode(monkeypatch):
    m = _positive_model()
    img = np.full((1, 16, 16), 0.2)
    img[0, 2:5, 2:5] = 0.9
    img[0, 11:14, 11:14] = 0.9
    two_map = nam_of(bump_map((16, 16), [((3, 3), 1.0), ((12, 12), 0.8)], sigma=1.6))
    monkeypatch.setattr(S, "compute_nam", lambda model, image: two_map)
    res = S.segment_slice_two_nodule(m, img, cfg=S.PipelineConfig(
        fill=0.2, icm=S.IcmConfig(window_margin=2)))
    assert res.outcome == "nodule"
    assert len(res.masks) == 2
    hits = {(mask[3, 3], mask[12, 12]) for mask in res.masks}
    assert (True, False) in hits and (False, True) in hits


def test_two_nodule_negative_gate():
    res = S.segment_slice_two_nodule(_negative_model(), np.full((1, 16, 16), 0.2))
    assert res.outcome == "no_nodule"
