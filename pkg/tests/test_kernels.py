"""Unit tests for the numba/numpy kernel pair."""

import os
import subprocess
import sys

import numpy as np
import pytest

from kktgen import kernels


def reference_adam(values, grads, m, v, t, lr, beta1, beta2, eps):
    m_new = beta1 * m + (1 - beta1) * grads
    v_new = beta2 * v + (1 - beta2) * grads ** 2
    m_hat = m_new / (1 - beta1 ** t)
    v_hat = v_new / (1 - beta2 ** t)
    return values - lr * m_hat / (np.sqrt(v_hat) + eps), m_new, v_new


def test_adam_update_matches_reference():
    rng = np.random.default_rng(0)
    values = rng.standard_normal(64)
    m = np.zeros(64)
    v = np.zeros(64)
    want = values.copy()
    wm, wv = m.copy(), v.copy()
    for t in range(1, 6):
        grads = rng.standard_normal(64)
        kernels.adam_update(values, grads, m, v, t, 1e-2)
        want, wm, wv = reference_adam(want, grads, wm, wv, t, 1e-2, 0.9,
                                      0.999, 1e-8)
    assert np.allclose(values, want, rtol=1e-12, atol=1e-15)
    assert np.allclose(m, wm) and np.allclose(v, wv)


def test_tv_batch_known_value():
    img = np.array([[[0.0, 1.0], [1.0, 0.0]]])  # checkerboard 2x2
    # row diffs: |1-0| + |0-1| = 2; col diffs: |1-0| + |0-1| = 2
    assert kernels.tv_batch(img) == pytest.approx(4.0)
    flat = np.zeros((3, 4, 4))
    assert kernels.tv_batch(flat) == 0.0


def test_tv_batch_shape_check():
    with pytest.raises(ValueError, match="batch, h, w"):
        kernels.tv_batch(np.zeros((4, 4)))


def test_ssim_uniform_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a = rng.random((12, 12))
    b = rng.random((12, 12))
    c1, c2 = 1e-4, 9e-4
    assert kernels.ssim_uniform(a, a, 8, c1, c2) == pytest.approx(1.0)
    assert kernels.ssim_uniform(a, b, 8, c1, c2) == pytest.approx(
        kernels.ssim_uniform(b, a, 8, c1, c2))
    assert kernels.ssim_uniform(a, b, 8, c1, c2) < 1.0


def test_ssim_uniform_validation():
    with pytest.raises(ValueError, match="equal-shape"):
        kernels.ssim_uniform(np.zeros((4, 4)), np.zeros((5, 5)), 2, 1e-4,
                             9e-4)
    with pytest.raises(ValueError, match="window"):
        kernels.ssim_uniform(np.zeros((4, 4)), np.zeros((4, 4)), 8, 1e-4,
                             9e-4)


@pytest.mark.skipif(not kernels.USE_NUMBA, reason="numba disabled")
def test_numba_and_numpy_paths_agree():
    rng = np.random.default_rng(2)
    grads = rng.standard_normal(128)
    v_np = np.ones(128)
    m_np = np.zeros(128)
    s_np = np.zeros(128)
    v_nb, m_nb, s_nb = v_np.copy(), m_np.copy(), s_np.copy()
    for t in range(1, 4):
        kernels._adam_update_np(v_np, grads, m_np, s_np, float(t), 1e-3,
                                0.9, 0.999, 1e-8)
        kernels._adam_update_nb(v_nb, grads, m_nb, s_nb, float(t), 1e-3,
                                0.9, 0.999, 1e-8)
    assert np.allclose(v_np, v_nb, rtol=1e-13, atol=1e-15)

    images = rng.random((5, 9, 9))
    assert kernels._tv_batch_np(images) == pytest.approx(
        kernels._tv_batch_nb(images), rel=1e-12)

    a = rng.random((10, 10))
    b = rng.random((10, 10))
    assert kernels._ssim_uniform_np(a, b, 4, 1e-4, 9e-4) == pytest.approx(
        kernels._ssim_uniform_nb(a, b, 4, 1e-4, 9e-4), rel=1e-12)


def test_disable_numba_env_flag():
    """KKTGEN_DISABLE_NUMBA=1 forces the numpy path with equal results."""
    code = (
        "import numpy as np\n"
        "from kktgen import kernels\n"
        "assert not kernels.USE_NUMBA\n"
        "rng = np.random.default_rng(3)\n"
        "values = np.ones(32); grads = rng.standard_normal(32)\n"
        "m = np.zeros(32); v = np.zeros(32)\n"
        "kernels.adam_update(values, grads, m, v, 1, 1e-2)\n"
        "print(repr(values.sum()))\n"
    )
    env = dict(os.environ, KKTGEN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr

    rng = np.random.default_rng(3)
    values = np.ones(32)
    grads = rng.standard_normal(32)
    m = np.zeros(32)
    v = np.zeros(32)
    kernels.adam_update(values, grads, m, v, 1, 1e-2)
    assert out.stdout.strip() == repr(values.sum())
