import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dynstyle import features as F
from dynstyle.gradcheck import check_hgst
from dynstyle.losses import (
    COMPONENTS, LocalDifferenceSet, LossLog, LossWeights, _lcl, consistency_loss, content_loss, gram,
    gram_style_distance, identity_loss, illumination_loss, inner_channel_loss, lcl_levels,
    local_contrastive_loss, prepare_targets, reconstruction_loss, reconstruction_loss_grad, sample_indices,
    sample_local_differences, style_loss, total_hgst_loss, tv_grad, tv_loss, weighted_total,
)


def _pyr(seed, size=16):
    return F.extract(np.random.default_rng(seed).random((size, size, 3)))


def _maps(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False, width=32))


def test_default_weights():
    w = LossWeights()
    assert (w.consistency, w.style, w.id, w.illum, w.ins, w.tau) == (3, 18, 7, 1e-5, 1, 0.07)
    assert w.n_samples == 64 and w.illum_sigma == 0.01


@pytest.mark.parametrize("kw", [{"style": -1.0}, {"tau": 0.0}, {"n_samples": 0}])
def test_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


# -- style ------------------------------------------------------------------------------


def test_style_loss_identity():
    p = _pyr(0)
    assert style_loss(p, p) == 0.0


def test_style_loss_mean_offset():
    a = [np.zeros((2, 2, 2))]
    b = [np.ones((2, 2, 2))]
    assert style_loss(a, b) == 2.0


def test_style_loss_spatial_permutation_invariant():
    rng = np.random.default_rng(1)
    a = [rng.normal(size=(3, 4, 4))]
    b = [rng.normal(size=(3, 4, 4))]
    perm = rng.permutation(16)
    a_p = [a[0].reshape(3, 16)[:, perm].reshape(3, 4, 4)]
    assert style_loss(a_p, b) == pytest.approx(style_loss(a, b), rel=1e-12)


def test_style_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        style_loss([np.zeros((2, 2, 2))], [np.zeros((3, 2, 2))])


# -- identity / illumination ------------------------------------------------------------


def test_identity_loss_cases():
    rng = np.random.default_rng(2)
    c, s = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    assert identity_loss(c, c, s, s) == 0.0
    assert identity_loss(c + 0.1, c, s, s) == pytest.approx(0.01, rel=1e-12)
    cc, ss = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    assert identity_loss(cc, c, ss, s) == identity_loss(ss, s, cc, c)


def test_illumination_loss_zero_sigma():
    c = np.random.default_rng(3).random((4, 4, 3))
    assert illumination_loss(lambda a, b: a * 0.5 + b, c, c, seed=1, sigma=0.0) == 0.0


def test_illumination_loss_identity_stylizer_equals_noise_energy():
    c = np.random.default_rng(4).random((8, 8, 3))
    eps = np.random.default_rng(9).normal(size=c.shape) * 0.01
    val = illumination_loss(lambda a, b: a, c, c, seed=9, sigma=0.01)
    assert val == pytest.approx(np.mean(eps ** 2), rel=1e-12)
    assert val == illumination_loss(lambda a, b: a, c, c, seed=9, sigma=0.01)


# -- inner channel ----------------------------------------------------------------------


def test_inner_channel_identical_positions():
    assert inner_channel_loss(np.ones((3, 4, 4))) == 0.0


def test_inner_channel_opposite_pair():
    x = np.array([[[1.0, -1.0]], [[2.0, -2.0]]])    # two positions, v and -v
    assert inner_channel_loss(x) * 2 == pytest.approx(2.0, abs=1e-15)


@given(_maps((3, 3, 3)), st.floats(0.01, 100))
def test_inner_channel_scale_invariant(x, k):
    assert inner_channel_loss(k * x) == pytest.approx(inner_channel_loss(x), abs=1e-9)


# -- local differences ------------------------------------------------------------------


def test_constant_map_has_zero_diffs():
    ds = sample_local_differences(np.full((4, 6, 6), 2.0), np.full((4, 6, 6), 1.0), 5, 0)
    assert np.all(ds.diffs_g == 0) and np.all(ds.diffs_c == 0)


def test_same_seed_same_samples():
    m = np.random.default_rng(5).random((4, 8, 8))
    a, b = sample_local_differences(m, m, 10, 3), sample_local_differences(m, m, 10, 3)
    np.testing.assert_array_equal(a.anchors, b.anchors)
    np.testing.assert_array_equal(a.neighbors, b.neighbors)
    np.testing.assert_array_equal(a.diffs_g, a.diffs_c)


@given(st.integers(3, 12), st.integers(3, 12), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_sample_indices_in_bounds_and_distinct(h, w, n, seed):
    anchors, nb = sample_indices(h, w, n, seed)
    assert len(anchors) == min(n, (h - 2) * (w - 2))
    assert np.all(anchors >= 1) and np.all(anchors[:, 0] <= h - 2) and np.all(anchors[:, 1] <= w - 2)
    assert len({tuple(a) for a in anchors}) == len(anchors)
    assert np.all((nb[..., 0] >= 0) & (nb[..., 0] < h) & (nb[..., 1] >= 0) & (nb[..., 1] < w))
    for a, row in zip(anchors, nb):
        pts = {tuple(a)} | {tuple(p) for p in row}
        assert len(pts) == 9
        assert np.all(np.abs(row - a) <= 2)


def test_map_too_small_rejected():
    with pytest.raises(ValueError, match="too small"):
        sample_local_differences(np.zeros((2, 2, 5)), np.zeros((2, 2, 5)), 3, 0)


def test_difference_set_size_validation():
    with pytest.raises(ValueError):
        LocalDifferenceSet(np.zeros((1, 2)), np.zeros((1, 8, 2)), np.zeros((7, 3)), np.zeros((7, 3)))


# -- contrastive ------------------------------------------------------------------------


def test_lcl_orthonormal_closed_form():
    tau = 0.07
    eye = np.eye(8)
    ds = LocalDifferenceSet(np.zeros((1, 2)), np.zeros((1, 8, 2)), eye, eye)
    expect = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 8 - 1))
    assert local_contrastive_loss(ds, tau) == pytest.approx(expect, rel=1e-12)


def test_lcl_single_pair_is_zero():
    v = np.array([[0.3, -0.2, 0.9]])
    assert _lcl(v, v, 0.07)[0] == 0.0


def test_lcl_permuted_pairing_scores_worse():
    rng = np.random.default_rng(6)
    m = rng.normal(size=(8, 6, 6))
    ds = sample_local_differences(m, m + 0.05 * rng.normal(size=m.shape), 8, 0)
    aligned = local_contrastive_loss(ds)
    for _ in range(10):
        perm = rng.permutation(len(ds.diffs_c))
        shuffled = LocalDifferenceSet(ds.anchors, ds.neighbors, ds.diffs_g, ds.diffs_c[perm])
        assert local_contrastive_loss(shuffled) >= aligned


# -- content / consistency --------------------------------------------------------------


def test_content_loss_cases():
    p = _pyr(7)
    assert content_loss(p, p) == 0.0
    assert content_loss([np.full((2, 3, 3), 0.5)], [np.zeros((2, 3, 3))]) == 0.25


@given(_maps((2, 3, 3)), _maps((2, 3, 3)))
def test_content_loss_nonnegative(a, b):
    assert content_loss([a], [b]) >= 0.0


def test_consistency_is_exact_sum_of_terms():
    a, b = _pyr(8, 32), _pyr(9, 32)
    total, lcl, cont = consistency_loss(a, b, n=16, seed=2)
    att_a = [F.attend(a.levels[i]) for i in (2, 3, 4)]
    att_b = [F.attend(b.levels[i]) for i in (2, 3, 4)]
    assert lcl == lcl_levels(att_a, att_b, 16, 2, 0.07)
    assert cont == content_loss(att_a, att_b)
    assert total == lcl + cont


def test_constant_features_leave_only_the_uniform_softmax_term():
    # all diffs are zero and share the e1 fallback, so every row is a uniform softmax over 8N;
    # the 2x2 level is too small to sample and contributes nothing
    lv = [np.full((c, s, s), 1.0) for c, s in zip(F.CHANNELS, (32, 16, 8, 4, 2))]
    pyr = F.FeaturePyramid(lv)
    total, lcl, cont = consistency_loss(pyr, pyr, n=4)
    assert cont == 0.0 and total == lcl
    assert lcl == pytest.approx(2 * math.log(32), rel=1e-12)


# -- tv / reconstruction ----------------------------------------------------------------


def test_tv_constant_is_zero():
    assert tv_loss(np.full((5, 6, 3), 0.3)) == 0.0


def test_tv_single_vertical_step():
    H, W = 5, 7
    im = np.zeros((H, W, 3))
    im[:, 4:] = 1.0
    # H unit steps per channel among H*(W-1) horizontal differences
    assert tv_loss(im) == pytest.approx(H * 1 / (H * (W - 1)), rel=1e-15)


@given(_maps((4, 5, 3)))
def test_tv_flip_symmetry(im):
    assert tv_loss(im) == tv_loss(im[:, ::-1])
    assert tv_loss(im) == tv_loss(im[::-1])


def test_tv_grad_matches_finite_differences():
    im = np.random.default_rng(10).random((5, 6, 3))
    g = tv_grad(im)
    h = 1e-7
    for idx in [(0, 0, 0), (2, 3, 1), (4, 5, 2)]:
        e = np.zeros_like(im)
        e[idx] = h
        assert g[idx] == pytest.approx((tv_loss(im + e) - tv_loss(im - e)) / (2 * h), rel=1e-5)


def test_reconstruction_cases():
    c = np.full((4, 4, 3), 0.4)
    assert reconstruction_loss(c, c) == 0.0
    assert reconstruction_loss(c + 0.2, c) == pytest.approx(0.2, rel=1e-12)
    rng = np.random.default_rng(11)
    r, t = rng.random((4, 4, 3)), rng.random((4, 4, 3))
    l1, tv, _ = reconstruction_loss_grad(r, t)
    assert reconstruction_loss(r, t) == l1 + tv
    with pytest.raises(ValueError, match="shape mismatch"):
        reconstruction_loss(r, t[:2])


# -- Gram -------------------------------------------------------------------------------


def test_gram_hand_value():
    np.testing.assert_array_equal(gram(np.array([[[1.0]], [[2.0]]])), [[0.5, 1.0], [1.0, 2.0]])


def test_gram_symmetric_psd_on_1000_maps():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        c = int(rng.integers(1, 7))
        g = gram(rng.normal(size=(c, int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
        assert np.array_equal(g, g.T)
        assert np.min(np.linalg.eigvalsh(g)) >= -1e-8


@given(_maps((3, 2, 2)), st.floats(-10, 10))
def test_gram_bilinear(f, k):
    np.testing.assert_allclose(gram(k * f), k * k * gram(f), rtol=1e-9, atol=1e-9)


def test_gram_distance_cases():
    p = _pyr(13)
    assert gram_style_distance(p, p) == 0.0
    assert gram_style_distance([np.ones((1, 1, 1))], [np.full((1, 1, 1), 2.0)]) == 9.0
    rng = np.random.default_rng(14)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    a_p = a.reshape(3, 16)[:, rng.permutation(16)].reshape(3, 4, 4)
    assert gram_style_distance([a_p], [b]) == pytest.approx(gram_style_distance([a], [b]), rel=1e-12)


# -- total --------------------------------------------------------------------------------


def test_weighted_total_cases():
    w = LossWeights()
    assert weighted_total(dict.fromkeys(COMPONENTS, 0.0), w) == 0.0
    assert weighted_total(dict.fromkeys(COMPONENTS, 1.0), w) == pytest.approx(29.00001, rel=1e-15)
    rng = np.random.default_rng(15)
    comp = dict(zip(COMPONENTS, rng.random(5)))
    for k in COMPONENTS:
        w0 = LossWeights(**{k: 0.0})
        assert weighted_total(comp, w0) == pytest.approx(weighted_total(comp, w) - getattr(w, k) * comp[k],
                                                         rel=1e-12)


def test_total_components_match_standalone_losses():
    rng = np.random.default_rng(16)
    content, style, image = rng.random((32, 32, 3)), rng.random((32, 32, 3)), rng.random((32, 32, 3))
    tg = prepare_targets(content, style)
    total, comp, grad = total_hgst_loss(image, tg, LossWeights(n_samples=8), seed=4)
    assert grad is None
    pyr = F.extract(image)
    assert comp["style"] == pytest.approx(style_loss(pyr, tg.pyr_s), rel=1e-12)
    assert comp["consistency"] == pytest.approx(consistency_loss(pyr, tg.pyr_c, n=8, seed=4)[0], rel=1e-12)
    assert comp["ins"] == pytest.approx(sum(inner_channel_loss(pyr.levels[i]) for i in (2, 3, 4)), rel=1e-12)
    assert total == weighted_total(comp, LossWeights(n_samples=8))


@pytest.mark.parametrize("seed", range(2))
def test_total_pixel_gradient_matches_finite_differences(seed):
    err, checked = check_hgst(seed)
    assert checked > 0 and err < 1e-3


def test_loss_log_jsonl(tmp_path):
    log = LossLog(tmp_path / "log" / "loss.jsonl")
    log.write(3, {"style": 0.5, "id": 1.0})
    log.close()
    rows = [json.loads(line) for line in (tmp_path / "log" / "loss.jsonl").read_text().splitlines()]
    assert rows == [{"step": 3, "component": "id", "value": 1.0}, {"step": 3, "component": "style", "value": 0.5}]
