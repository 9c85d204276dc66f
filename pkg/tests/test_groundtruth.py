import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffcount.groundtruth import (
    CENTER_WEIGHT,
    DEFAULT_SCALE,
    KERNEL,
    MIN_WEIGHT,
    CrowdSample,
    gaussian_kernel,
    read_dmap,
    render_density,
    scale_density,
    unscale_density,
    write_dmap,
)

# 3x3, sigma = 0.5 unit-sum weights (mpmath, 20 digits)
W_CENTER = 0.61934703055717729024
W_EDGE = 0.083819505802210604372
W_CORNER = 0.011343736558495073069


def separated_points(rng, n, h, w, sep=3, margin=1):
    pts = []
    while len(pts) < n:
        p = rng.integers([margin, margin], [w - margin, h - margin])
        if all(max(abs(p[0] - q[0]), abs(p[1] - q[1])) >= sep for q in pts):
            pts.append(p)
    return np.array(pts, dtype=float)


def test_kernel_weights_against_oracle():
    assert KERNEL.sum() == pytest.approx(1.0, abs=1e-12)
    assert CENTER_WEIGHT == pytest.approx(W_CENTER, rel=1e-13)
    assert KERNEL[0, 1] == pytest.approx(W_EDGE, rel=1e-13)
    assert KERNEL[0, 0] == pytest.approx(W_CORNER, rel=1e-13)
    assert MIN_WEIGHT == pytest.approx(W_CORNER, rel=1e-13)


def test_kernel_rejects_even_size():
    with pytest.raises(ValueError):
        gaussian_kernel(4)


def test_empty_render():
    assert not render_density(np.empty((0, 2)), 8, 9).any()


def test_single_point_mass_and_peak():
    d = render_density([[4, 5]], 10, 10)
    assert d.sum() == pytest.approx(1.0, abs=1e-9)
    assert d[5, 4] == pytest.approx(W_CENTER, rel=1e-12)
    assert d.max() == d[5, 4]


def test_two_points_disjoint():
    d = render_density([[2, 2], [5, 2]], 8, 8)
    assert d.sum() == pytest.approx(2.0, abs=1e-9)
    assert d[:, 3:5].max() == pytest.approx(W_EDGE)  # neighbouring columns of separate kernels
    assert np.count_nonzero(d) == 18


def test_rounding_is_half_up():
    a = render_density([[3.5, 2.49]], 8, 8)
    b = render_density([[4, 2]], 8, 8)
    np.testing.assert_array_equal(a, b)


def test_border_kernel_truncated_not_renormalised():
    d = render_density([[0, 0]], 5, 5)
    assert d.sum() == pytest.approx(W_CENTER + 2 * W_EDGE + W_CORNER)


def test_out_of_bounds_point_rejected():
    with pytest.raises(ValueError, match="outside"):
        render_density([[10, 1]], 10, 10)
    with pytest.raises(ValueError):
        CrowdSample(np.zeros((4, 4, 3)), [[1, 4]])


def test_crowd_sample_count():
    s = CrowdSample(np.zeros((6, 6, 3)), [[1, 1], [2, 3], [4, 4]])
    assert s.count == 3 and (s.height, s.width) == (6, 6)


def test_scale_examples():
    assert np.all(scale_density(np.zeros((3, 3))) == -1)
    assert scale_density(np.array([W_CENTER]), 1 / W_CENTER)[0] == pytest.approx(1.0, abs=1e-15)
    assert unscale_density(np.array([1.0]), 1 / W_CENTER)[0] == pytest.approx(W_CENTER, rel=1e-12)
    assert np.all(unscale_density(-np.ones((2, 2))) == 0)
    assert unscale_density(np.array([-1 - 1e-3]))[0] == 0.0


def test_scale_clips_overlap_at_one():
    d = render_density([[3, 3], [3, 3]], 7, 7)
    assert scale_density(d).max() == 1.0


def test_scale_rejects_nonpositive():
    for f in (scale_density, unscale_density):
        with pytest.raises(ValueError):
            f(np.zeros(2), 0.0)


def test_translation_equivariance():
    rng = np.random.default_rng(3)
    pts = separated_points(rng, 10, 30, 30, margin=3)
    a = render_density(pts, 40, 40)
    b = render_density(pts + [4, 7], 40, 40)
    np.testing.assert_allclose(np.roll(np.roll(a, 7, axis=0), 4, axis=1), b)


def test_nonzero_values_are_kernel_multiset():
    rng = np.random.default_rng(5)
    pts = separated_points(rng, 25, 48, 48)
    d = render_density(pts, 48, 48)
    got = np.sort(d[d > 0])
    want = np.sort(np.tile(KERNEL.ravel(), len(pts)))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_dmap_round_trip(tmp_path):
    d = render_density([[1, 2], [5, 5]], 7, 9)
    write_dmap(tmp_path / "a.dmap", d)
    raw = (tmp_path / "a.dmap").read_bytes()
    assert raw[:4] == b"DMAP" and int.from_bytes(raw[4:6], "little") == 7
    np.testing.assert_allclose(read_dmap(tmp_path / "a.dmap"), d.astype(np.float32))


def test_dmap_rejects_bad_magic(tmp_path):
    (tmp_path / "b.dmap").write_bytes(b"XXXX\x01\x00\x01\x00" + b"\x00" * 4)
    with pytest.raises(ValueError, match="magic"):
        read_dmap(tmp_path / "b.dmap")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(0, 30))
def test_mass_equals_count_property(seed, n):
    rng = np.random.default_rng(seed)
    pts = separated_points(rng, n, 40, 40)
    d = render_density(pts, 40, 40)
    assert d.sum() == pytest.approx(n, abs=1e-6)
    assert (d >= 0).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 0.6), min_size=1, max_size=50))
def test_scale_round_trip_property(vals):
    v = np.array(vals)
    s = scale_density(v, DEFAULT_SCALE)
    unclipped = s < 1.0
    np.testing.assert_allclose(unscale_density(s)[unclipped], v[unclipped], atol=1e-9)
