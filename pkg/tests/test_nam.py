import numpy as np
import pytest
from scipy import ndimage

from namseg import model as M
from namseg import nam as N
from namseg import tensor as T
from namseg.errors import DimensionError, DomainError, NumericError

TOY = M.ModelConfig(input_size=(16, 16), stage_channels=(4, 8), gap_taps=(1,),
                    head_channels=4)
TOY2 = M.ModelConfig(input_size=(16, 16), stage_channels=(4, 8), gap_taps=(0, 1),
                     head_channels=3)


def rand_image(rng, size=(16, 16)):
    return rng.uniform(0, 1, size=(1,) + size)


# -- bilinear upsampling -------------------------------------------------------

def test_upsample_identity_and_corners():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(N.bilinear_upsample(a, (4, 4)), a)
    up = N.bilinear_upsample(a, (10, 10))
    assert up[0, 0] == a[0, 0] and up[-1, -1] == a[-1, -1]
    assert up[0, -1] == a[0, -1] and up[-1, 0] == a[-1, 0]


def test_upsample_constant_stays_constant():
    up = N.bilinear_upsample(np.full((3, 5), 2.5), (12, 20))
    np.testing.assert_allclose(up, 2.5, rtol=0, atol=1e-12)


def test_upsample_linear_ramp_exact():
    # bilinear reproduces a linear function exactly
    a = np.add.outer(np.arange(5.0), 2 * np.arange(5.0))
    up = N.bilinear_upsample(a, (9, 9))
    ys = np.linspace(0, 4, 9)
    want = np.add.outer(ys, 2 * ys)
    np.testing.assert_allclose(up, want, atol=1e-12)


def test_upsample_argmax_blob_property():
    rng = np.random.default_rng(1)
    for _ in range(20):
        raw = rng.normal(size=(8, 8))
        up = N.bilinear_upsample(raw, (64, 64))
        i, j = np.unravel_index(np.argmax(raw), raw.shape)
        sy, sx = 63 / 7, 63 / 7
        iy, ix = i * sy, j * sx
        plateau, _ = ndimage.label(up == up.max())
        lab = plateau[int(round(iy)), int(round(ix))] if plateau[int(round(iy)), int(round(ix))] else plateau.max()
        ys, xs = np.nonzero(plateau == plateau[np.unravel_index(np.argmax(up), up.shape)])
        dy, dx = int(np.ceil(sy)), int(np.ceil(sx))
        assert ys.min() - dy <= iy <= ys.max() + dy
        assert xs.min() - dx <= ix <= xs.max() + dx


# -- compute_nam -----------------------------------------------------------------

def test_zero_fc_row_gives_zero_map():
    m = M.build(TOY, 0)
    m.fc_w.data[1] = 0.0
    nam = N.compute_nam(m, np.zeros((1, 16, 16)))
    assert nam.score == 0.0
    np.testing.assert_array_equal(nam.map, np.zeros((16, 16)))


def test_nam_direct_weighted_sum(monkeypatch):
    cfg = M.ModelConfig(input_size=(16, 16), stage_channels=(4, 8), gap_taps=(1,),
                        head_channels=2)
    m = M.build(cfg, 0)
    m.fc_w.data[1] = [2.0, -1.0]
    a1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    a2 = np.array([[0.0, 0.0], [0.0, 1.0]])

    def fake_forward(model, image):
        return T.Tensor([0.0, 0.0]), [T.Tensor(np.stack([a1, a2]))]

    monkeypatch.setattr(N, "forward", fake_forward)
    nam = N.compute_nam(m, np.zeros((1, 16, 16)))
    np.testing.assert_array_equal(nam.raw_maps[0], [[2.0, 0.0], [0.0, -1.0]])
    assert nam.score == pytest.approx(0.25)


@pytest.mark.parametrize("cfg", [TOY, TOY2,
                                 M.ModelConfig(input_size=(16, 16), stage_channels=(4, 4, 4),
                                               gap_taps=(0, 1, 2), head_channels=3)])
def test_score_identity_random_models(cfg):
    rng = np.random.default_rng(42)
    for trial in range(10):
        m = M.build(cfg, seed=trial)
        img = rand_image(rng)
        logits, _ = M.forward(m, img)
        nam = N.compute_nam(m, img)
        lhs = nam.score + m.fc_b.data[1]
        assert abs(lhs - logits.data[1]) / (1 + abs(logits.data[1])) < 1e-9


def test_nam_linear_in_fc_row():
    rng = np.random.default_rng(3)
    m = M.build(TOY2, 1)
    img = rand_image(rng)
    base = N.compute_nam(m, img)
    m.fc_w.data = m.fc_w.data * 3.0
    scaled = N.compute_nam(m, img)
    np.testing.assert_allclose(scaled.map, 3.0 * base.map, atol=1e-12)
    assert scaled.score == pytest.approx(3.0 * base.score, rel=1e-12)


def test_nam_nonfinite_weights_raise():
    m = M.build(TOY, 0)
    m.heads[0]["w"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        N.compute_nam(m, np.zeros((1, 16, 16)))


def test_nam_map_finite():
    rng = np.random.default_rng(4)
    m = M.build(TOY2, 9)
    nam = N.compute_nam(m, rand_image(rng))
    assert np.all(np.isfinite(nam.map))


# -- compute_rnam -----------------------------------------------------------------

def test_rnam_empty_mask_is_identity():
    rng = np.random.default_rng(5)
    m = M.build(TOY, 2)
    img = rand_image(rng)
    nam = N.compute_nam(m, img)
    rnam = N.compute_rnam(m, img, np.zeros((16, 16), bool), fill=0.2)
    np.testing.assert_array_equal(rnam.map, nam.map)
    assert rnam.score == nam.score


def test_rnam_full_mask_is_constant_image_nam():
    rng = np.random.default_rng(6)
    m = M.build(TOY, 2)
    img = rand_image(rng)
    rnam = N.compute_rnam(m, img, np.ones((16, 16), bool), fill=0.3)
    const = N.compute_nam(m, np.full((1, 16, 16), 0.3))
    np.testing.assert_array_equal(rnam.map, const.map)


def test_rnam_mask_shape_checked():
    m = M.build(TOY, 0)
    with pytest.raises(DimensionError):
        N.compute_rnam(m, np.zeros((1, 16, 16)), np.zeros((8, 8), bool), fill=0.0)


# -- nam_distance ------------------------------------------------------------------

def _nam_of(arr):
    return N.Nam(map=np.asarray(arr, dtype=np.float64))


def test_distance_zero_for_equal_maps():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6, 6))
    scope = np.zeros((6, 6), bool)
    scope[2:4, 2:4] = True
    assert N.nam_distance(_nam_of(a), _nam_of(a.copy()), scope) == 0.0


def test_distance_three_pixels_diff_two():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    scope = np.zeros((4, 4), bool)
    for px in [(0, 1), (2, 2), (3, 0)]:
        b[px] = 2.0
        scope[px] = True
    b[1, 1] = 99.0  # outside scope: must not count
    assert N.nam_distance(_nam_of(a), _nam_of(b), scope) == pytest.approx(12.0)


def test_distance_matches_loop_oracle():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(9, 9))
    b = rng.normal(size=(9, 9))
    scope = rng.random((9, 9)) < 0.4
    scope[0, 0] = True
    want = 0.0
    for y in range(9):
        for x in range(9):
            if scope[y, x]:
                want += (a[y, x] - b[y, x]) ** 2
    got = N.nam_distance(_nam_of(a), _nam_of(b), scope)
    assert got == pytest.approx(want, rel=1e-12)


def test_distance_symmetric_nonnegative():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    scope = np.ones((5, 5), bool)
    d1 = N.nam_distance(_nam_of(a), _nam_of(b), scope)
    d2 = N.nam_distance(_nam_of(b), _nam_of(a), scope)
    assert d1 == d2 >= 0.0


def test_distance_empty_scope_raises():
    with pytest.raises(DomainError):
        N.nam_distance(_nam_of(np.ones((3, 3))), _nam_of(np.ones((3, 3))),
                       np.zeros((3, 3), bool))


def test_distance_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        N.nam_distance(_nam_of(np.ones((3, 3))), _nam_of(np.ones((4, 4))),
                       np.ones((3, 3), bool))


# -- dump / load ---------------------------------------------------------------------

def test_map_dump_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    a = rng.normal(size=(5, 7))
    p = tmp_path / "nam.txt"
    N.dump_map(a, p)
    np.testing.assert_array_equal(N.load_map(p), a)
