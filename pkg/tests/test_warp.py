"""Warp tests.  Pixel (row i, col j) sits at continuous coordinate (j, i); no half-pixel offset."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import RandomRoadCamera, gaussian_blobs, naive_warp, psnr
from ptlane import warp as W
from ptlane.autodiff import finite_diff_check
from ptlane.autodiff import warp as warp_op
from ptlane.errors import ShapeMismatch
from ptlane.geometry import CameraIntrinsics, Homography, ViewSpec, build_ptl_chain

BACKENDS = sorted(W.BACKENDS)


def view(h, w):
    return ViewSpec(CameraIntrinsics(100.0, w / 2, h / 2), w, h)


def random_homography(rng, src=(5, 7), dst=(6, 8), strength=0.15):
    m = np.eye(3) + rng.normal(scale=strength, size=(3, 3)) * np.array([[1, 1, 3], [1, 1, 3],
                                                                         [0.02, 0.02, 0]])
    return Homography.from_matrix(m, view(*src), view(*dst))


def road_homography(seed, n=2):
    cam = RandomRoadCamera(np.random.default_rng(seed))
    chain = build_ptl_chain(cam.k, cam.view, cam.horizon, cam.keypoints, n, [cam.width] * n)
    return cam, chain


@pytest.mark.parametrize("backend", BACKENDS)
def test_identity_is_exact(backend):
    x = np.random.default_rng(0).normal(size=(3, 6, 9))
    h = Homography.identity(view(6, 9))
    assert np.array_equal(W.warp_forward(x, h, backend=backend), x)
    assert np.array_equal(W.warp_backward(x, h, backend=backend), x)


@pytest.mark.parametrize("backend", BACKENDS)
def test_integer_translation(backend):
    x = np.random.default_rng(1).normal(size=(2, 4, 6))
    m = np.array([[1.0, 0, 2], [0, 1, 0], [0, 0, 1]])
    out = W.warp_forward(x, Homography.from_matrix(m, view(4, 6), view(4, 6)), backend=backend)
    assert np.all(out[:, :, :2] == 0)
    np.testing.assert_allclose(out[:, :, 2:], x[:, :, :-2], rtol=0, atol=1e-15)


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_naive_sampler(backend):
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = rng.normal(size=(1, 5, 7))
        h = random_homography(rng)
        ref = naive_warp(x, np.linalg.inv(h.matrix), 6, 8, h.orientation)
        np.testing.assert_allclose(W.warp_forward(x, h, backend=backend), ref, rtol=0,
                                   atol=1e-14)


@pytest.mark.parametrize("backend", BACKENDS)
def test_road_chain_matches_naive_sampler(backend):
    cam, chain = road_homography(3)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, cam.height, cam.width))
    h = chain.steps[0].homography
    ref = naive_warp(x, np.linalg.inv(h.matrix), *h.target.shape, h.orientation)
    np.testing.assert_allclose(W.warp_forward(x, h, backend=backend), ref, rtol=0, atol=1e-11)


def test_orientation_rejects_points_behind_camera():
    # flipping the sign of the matrix keeps the geometry but tells the sampler
    # every ray comes from behind, so nothing is read
    x = np.ones((1, 4, 4))
    h = Homography.identity(view(4, 4))
    flipped = Homography(h.matrix, h.source, h.target, -1.0)
    assert np.all(W.warp_forward(x, flipped) == 0)


def test_shape_mismatch():
    h = Homography.identity(view(4, 4))
    with pytest.raises(ShapeMismatch):
        W.warp_forward(np.zeros((1, 5, 4)), h)
    with pytest.raises(ShapeMismatch):
        W.warp_backward(np.zeros((1, 4, 5)), h)
    with pytest.raises(ShapeMismatch):
        W.warp_forward(np.zeros((4, 4)), h)


@pytest.mark.parametrize("backend", BACKENDS)
def test_adjoint_identity(backend):
    rng = np.random.default_rng(4)
    for seed in range(10):
        if seed % 2:
            h = random_homography(rng, (9, 11), (10, 13))
        else:
            _, chain = road_homography(seed)
            h = chain.integral
        x = rng.normal(size=(2,) + h.source.shape)
        y = rng.normal(size=(2,) + h.target.shape)
        lhs = np.sum(W.warp_forward(x, h, backend=backend) * y)
        rhs = np.sum(x * W.warp_backward(y, h, backend=backend))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    h = random_homography(rng, (4, 4), (4, 4), 0.1)
    report = finite_diff_check(lambda x: warp_op(x, h), {"x": rng.normal(size=(1, 4, 4))},
                               tolerance=1e-6)
    assert report.passed, report


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    cam, chain = road_homography(6, 3)
    rng = np.random.default_rng(6)
    for step in chain.steps:
        h = step.homography
        x = rng.normal(size=(4,) + h.source.shape)
        g = rng.normal(size=(4,) + h.target.shape)
        a = W.warp_forward(x, h, backend="compiled")
        b = W.warp_forward(x, h, backend="python")
        assert np.array_equal(a, b)
        np.testing.assert_allclose(W.warp_backward(g, h, backend="compiled"),
                                   W.warp_backward(g, h, backend="python"), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    x, y = rng.normal(size=(2, 2, 5, 7))
    lhs = W.warp_forward(a * x + b * y, h)
    rhs = a * W.warp_forward(x, h) + b * W.warp_forward(y, h)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_channel_independence():
    rng = np.random.default_rng(7)
    h = random_homography(rng)
    x = rng.normal(size=(3, 5, 7))
    full = W.warp_forward(x, h)
    for c in range(3):
        assert np.array_equal(W.warp_forward(x[c:c + 1], h)[0], full[c])


# ------------------------------------------------------------------ stride scaling


def test_stride_one_is_unchanged():
    h = random_homography(np.random.default_rng(8))
    assert W.scale_homography_for_stride(h, 1) is h


def test_stride_halves_translation():
    m = np.array([[1.0, 0, 6], [0, 1, -4], [0, 0, 1]])
    h = Homography.from_matrix(m, view(8, 8), view(8, 8))
    s = W.scale_homography_for_stride(h, 2)
    np.testing.assert_allclose(s.matrix / s.matrix[2, 2], [[1, 0, 3], [0, 1, -2], [0, 0, 1]],
                               atol=1e-15)
    assert s.source.shape == (4, 4)


def test_stride_viewports_round_up():
    h = Homography.identity(view(101, 128))
    assert W.scale_homography_for_stride(h, 4).target.shape == (26, 32)


def test_strided_impulse_lands_near_full_resolution_impulse():
    _, chain = road_homography(9, 1)
    h = chain.integral
    s4 = W.scale_homography_for_stride(h, 4)
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 20:
        # pick a source pixel on the 4x grid whose image is well inside the target
        r, c = rng.integers(0, s4.source.height), rng.integers(0, s4.source.width)
        full = h.transfer([[4 * c, 4 * r]])[0]
        if not (8 <= full[0] < h.target.width - 8 and 8 <= full[1] < h.target.height - 8):
            continue
        # strong magnification smears the impulse into a lopsided footprint
        jac = s4.transfer([[c + 1, r], [c, r + 1]]) - s4.transfer([[c, r]])
        if np.abs(jac).sum(axis=1).max() > 2.0:
            continue
        img = np.zeros((1,) + h.source.shape)
        img[0, 4 * r, 4 * c] = 1.0
        ref = W.warp_forward(img, h)[0]
        # full-resolution response, then downsample its centroid
        ys, xs = np.nonzero(ref)
        if len(ys) == 0:
            continue
        wts = ref[ys, xs]
        ref_loc = np.array([np.average(xs, weights=wts), np.average(ys, weights=wts)]) / 4
        small = np.zeros((1,) + s4.source.shape)
        small[0, r, c] = 1.0
        out = W.warp_forward(small, s4)[0]
        ys, xs = np.nonzero(out)
        if len(ys) == 0:
            continue
        wts = out[ys, xs]
        loc = np.array([np.average(xs, weights=wts), np.average(ys, weights=wts)])
        assert np.linalg.norm(loc - ref_loc) <= 1.0
        checked += 1


# ------------------------------------------------------------------ round trip


def interior_round_trip_psnr(seed):
    cam, chain = road_homography(seed, 3)
    h = chain.integral
    rng = np.random.default_rng(seed)
    img = gaussian_blobs((cam.height, cam.width), rng)
    back = W.warp_forward(W.warp_forward(img, h), h.inverse())
    # pixels whose forward image and own position stay 2 px inside the bounds
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(float)
    fwd = h.transfer(pts)
    tw, th = h.target.width, h.target.height
    ok = ((fwd[:, 0] >= 2) & (fwd[:, 0] <= tw - 3) & (fwd[:, 1] >= 2) & (fwd[:, 1] <= th - 3)
          & (pts[:, 0] >= 2) & (pts[:, 0] <= cam.width - 3)
          & (pts[:, 1] >= 2) & (pts[:, 1] <= cam.height - 3))
    mask = ok.reshape(cam.height, cam.width)
    return psnr(back[:, mask], img[:, mask], img.max()), int(mask.sum())


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_psnr(seed):
    value, support = interior_round_trip_psnr(seed)
    assert support > 100
    assert value >= 30.0
