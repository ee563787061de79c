import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import crf_mean_field
from wsseg.cam import ActivationMap
from wsseg.datasets import IGNORE
from wsseg.errors import ConfigError, ShapeError, ValidationError
from wsseg.refine import (CrfParams, Trimap, dense_crf, filter_small_regions, mark_degenerate,
                          probabilities_from_labels, probabilities_from_maps, threshold_to_trimap)


def test_threshold_example():
    m = np.array([[0.9, 0.5], [0.05, 0.2]])
    t = threshold_to_trimap([(0, m)], 0.7, 0.1, 1)
    assert t.labels.tolist() == [[1, IGNORE], [0, IGNORE]]


def test_threshold_strongest_class_wins():
    a = np.array([[0.9, 0.8]])
    b = np.array([[0.8, 0.95]])
    t = threshold_to_trimap([(0, a), (1, b)], 0.7, 0.1, 2)
    assert t.labels.tolist() == [[1, 2]]


def test_threshold_no_maps_is_background():
    t = threshold_to_trimap([], 0.7, 0.1, 2, size=(3, 4))
    assert t.labels.shape == (3, 4) and not t.labels.any()


def test_threshold_errors():
    with pytest.raises(ConfigError):
        threshold_to_trimap([(0, np.zeros((2, 2)))], 0.2, 0.5, 1)
    with pytest.raises(ShapeError):
        threshold_to_trimap([(0, np.zeros((2, 2))), (1, np.zeros((3, 2)))], 0.7, 0.1, 2)
    with pytest.raises(ValidationError):
        Trimap(np.full((2, 2), 3, np.uint8), 1)


@given(hnp.arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0.3, 0.9), st.floats(0.01, 0.3),
       st.floats(0, 0.2))
def test_threshold_monotone(m, fg, bg, step):
    """Raising fg shrinks foreground; raising bg grows background."""
    base = threshold_to_trimap([(0, m)], fg, bg, 1).labels
    higher_fg = threshold_to_trimap([(0, m)], min(fg + step, 1.0), bg, 1).labels
    assert ((higher_fg == 1) <= (base == 1)).all()
    higher_bg = threshold_to_trimap([(0, m)], fg + step, min(bg + step, fg + step), 1).labels
    assert ((base == 0) <= (higher_bg == 0)).all()


def test_upsampled_maps():
    am = ActivationMap(0, np.ones((4, 4), np.float32), (16, 16))
    t = threshold_to_trimap([am], 0.7, 0.1, 1, size=(16, 16))
    assert t.labels.shape == (16, 16) and (t.labels == 1).all()


def test_mark_degenerate():
    t = Trimap(np.zeros((3, 3), np.uint8), 1)
    z = ActivationMap(0, np.zeros((2, 2), np.float32), (3, 3))
    assert (mark_degenerate(t, [z]).labels == IGNORE).all()
    nz = ActivationMap(0, np.eye(2, dtype=np.float32), (3, 3))
    assert mark_degenerate(t, [z, nz]) == t
    assert mark_degenerate(t, []) == t


# -- CRF ----------------------------------------------------------------------

def _probs(rng, L, h, w):
    p = rng.random((L, h, w)) + 0.05
    return p / p.sum(0)


@pytest.mark.parametrize("seed", range(3))
def test_crf_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = 5, 6
    img = rng.random((h, w, 3)) * 255
    probs = _probs(rng, 3, h, w)
    params = CrfParams(iterations=4, gaussian_weight=2.0, gaussian_sigma_xy=1.5, bilateral_weight=3.0,
                       bilateral_sigma_xy=4.0, bilateral_sigma_rgb=30.0)
    got = dense_crf(img, probs, params)
    want = crf_mean_field(img, probs, 4, 2.0, 1.5, 3.0, 4.0, 30.0)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_crf_uint8_grid_path_matches_oracle():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (6, 7), dtype=np.uint8)
    probs = _probs(rng, 2, 6, 7)
    params = CrfParams(iterations=3, bilateral_sigma_xy=5.0, bilateral_sigma_rgb=20.0)
    want = crf_mean_field(img, probs, 3, 3.0, 3.0, 4.0, 5.0, 20.0)
    np.testing.assert_allclose(dense_crf(img, probs, params), want, atol=1e-5)


@given(st.integers(0, 2 ** 16), st.integers(2, 4))
def test_crf_output_normalised(seed, L):
    rng = np.random.default_rng(seed)
    out = dense_crf(rng.integers(0, 256, (6, 6), dtype=np.uint8), _probs(rng, L, 6, 6), CrfParams(iterations=3))
    assert out.min() >= 0
    np.testing.assert_allclose(out.sum(0), 1.0, atol=1e-5)


def test_crf_identities():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (8, 8), dtype=np.uint8)
    probs = _probs(rng, 3, 8, 8)
    np.testing.assert_array_equal(dense_crf(img, probs, CrfParams(iterations=0)), probs)
    flat = dense_crf(img, probs, CrfParams(gaussian_weight=0, bilateral_weight=0))
    assert np.array_equal(flat.argmax(0), probs.argmax(0))


def test_crf_corrects_flipped_pixel():
    img = np.zeros((12, 12), np.uint8)
    img[:, 6:] = 200
    labels = (img > 0).astype(np.uint8)
    labels[3, 2] = 1  # a single wrong pixel inside the dark half
    probs = probabilities_from_labels(labels, 2, confidence=0.7)
    out = dense_crf(img, probs, CrfParams(iterations=5, bilateral_sigma_xy=10.0, bilateral_sigma_rgb=10.0))
    assert out.argmax(0)[3, 2] == 0
    assert np.array_equal(np.delete(out.argmax(0).ravel(), 3 * 12 + 2),
                          np.delete((img > 0).ravel().astype(int), 3 * 12 + 2))


def test_crf_uniform_stays_uniform():
    img = np.full((5, 5), 90, np.uint8)
    probs = np.full((3, 5, 5), 1 / 3)
    np.testing.assert_allclose(dense_crf(img, probs), probs, atol=1e-12)


def test_crf_validation():
    img = np.zeros((4, 4), np.uint8)
    with pytest.raises(ValidationError):
        dense_crf(img, np.full((2, 4, 4), 0.7))
    with pytest.raises(ShapeError):
        dense_crf(img, np.full((2, 3, 4), 0.5))
    with pytest.raises(ConfigError):
        CrfParams(iterations=-1)
    with pytest.raises(ConfigError):
        CrfParams(bilateral_sigma_rgb=0.0)


def test_probabilities_from_maps():
    p = probabilities_from_maps([(1, np.array([[0.8, 0.0]]))], 2)
    np.testing.assert_allclose(p.sum(0), 1.0)
    assert p[:, 0, 0].argmax() == 2 and p[:, 0, 1].argmax() == 0


# -- small-region filter ------------------------------------------------------

def _two_regions():
    lab = np.zeros((10, 10), np.uint8)
    lab[1:3, 1:3] = 1  # 4 px
    lab[5:9, 5:9] = 1  # 16 px
    return Trimap(lab, 1)


def test_filter_drops_small_unconfident():
    t = _two_regions()
    out = filter_small_regions(t, 10, np.full((10, 10), 0.3), 0.5)
    assert (out.labels[1:3, 1:3] == IGNORE).all() and (out.labels[5:9, 5:9] == 1).all()


def test_filter_keeps_confident_small():
    t = _two_regions()
    assert filter_small_regions(t, 10, np.full((10, 10), 0.9), 0.5) == t
    assert filter_small_regions(t, 0, np.zeros((10, 10)), 0.5) == t


def test_filter_four_connectivity():
    lab = np.zeros((4, 4), np.uint8)
    lab[0, 0] = lab[1, 1] = 1  # diagonal neighbours are separate regions
    out = filter_small_regions(Trimap(lab, 1), 2, np.zeros((4, 4)), 0.5)
    assert out.labels[0, 0] == IGNORE and out.labels[1, 1] == IGNORE


@given(hnp.arrays(np.uint8, (8, 8), elements=st.sampled_from([0, 1, 2, IGNORE])),
       hnp.arrays(np.float64, (8, 8), elements=st.floats(0, 1)), st.integers(0, 10))
def test_filter_idempotent(lab, conf, area):
    once = filter_small_regions(Trimap(lab, 2), area, conf, 0.5)
    assert filter_small_regions(once, area, conf, 0.5) == once
    changed = once.labels != lab
    assert (once.labels[changed] == IGNORE).all()
