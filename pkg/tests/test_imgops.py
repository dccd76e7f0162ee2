"""Gradients and values for the image-filter primitives."""

import numpy as np
import pytest

from splatdistill import diffmath as dm

from fdcheck import check_grads


def test_gaussian_kernel_normalized_and_symmetric():
    k = dm.gaussian_kernel1d(11, 1.5)
    assert k.shape == (11,)
    assert float(k.sum()) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(k, k[::-1])


def test_conv_separable_valid_constant_image():
    img = dm.tensor(np.full((12, 12, 2), 0.7, dtype=np.float32))
    out = dm.conv_separable_valid(img, dm.gaussian_kernel1d(5, 1.0))
    assert out.shape == (8, 8, 2)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-6)


def test_conv_separable_valid_matches_direct_sum():
    rng = np.random.default_rng(0)
    img = rng.random((7, 7, 1)).astype(np.float32)
    k = dm.gaussian_kernel1d(3, 0.8).astype(np.float64)
    out = dm.conv_separable_valid(dm.tensor(img), k).data
    k2 = np.outer(k, k)
    expect = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            expect[i, j] = (img[i : i + 3, j : j + 3, 0] * k2).sum()
    np.testing.assert_allclose(out[:, :, 0], expect, atol=1e-5)


def test_conv_separable_grad():
    rng = np.random.default_rng(1)
    img = dm.param(rng.random((9, 8, 2)), name="img")
    k = dm.gaussian_kernel1d(5, 1.5)
    wt = rng.normal(size=(5, 4, 2))
    check_grads(lambda: dm.conv_separable_valid(img, k), [img], weights=wt)


def test_conv3x3_reflect_constant_zero_for_sobel():
    sobel_x = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
    img = dm.tensor(np.full((6, 6, 3), 0.4, dtype=np.float32))
    out = dm.conv3x3_reflect(img, sobel_x)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_conv3x3_reflect_grad():
    rng = np.random.default_rng(2)
    img = dm.param(rng.random((6, 7, 2)), name="img")
    kern = rng.normal(size=(3, 3)).astype(np.float32)
    wt = rng.normal(size=(6, 7, 2))
    check_grads(lambda: dm.conv3x3_reflect(img, kern), [img], weights=wt)


def test_avg_pool2_value_and_grad():
    rng = np.random.default_rng(3)
    img = dm.param(rng.random((6, 4, 3)), name="img")
    out = dm.avg_pool2(img)
    assert out.shape == (3, 2, 3)
    np.testing.assert_allclose(
        out.data[0, 0], img.data[0:2, 0:2].mean(axis=(0, 1)), rtol=1e-6
    )
    wt = rng.normal(size=(3, 2, 3))
    check_grads(lambda: dm.avg_pool2(img), [img], weights=wt)
