"""numba and numpy kernel paths must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest

from desknas import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba unavailable")


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_dwconv_paths_agree(stride, k, rng):
    x = rng.normal(size=(3, 11 + k - 1, 7))
    w = rng.normal(size=(k, 7))
    l_out = (11 - 1) // stride + 1
    y_np = K.dwconv_fwd_np(x, w, stride, l_out)
    y_nb = K.dwconv_fwd_nb(x, w, stride, l_out)
    np.testing.assert_allclose(y_nb, y_np, rtol=1e-12, atol=1e-12)
    dy = rng.normal(size=y_np.shape)
    for a, b in zip(K.dwconv_bwd_np(x, w, dy, stride), K.dwconv_bwd_nb(x, w, dy, stride)):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-12)


def test_dwconv_matches_direct_formula(rng):
    x = rng.normal(size=(2, 9, 4))
    w = rng.normal(size=(3, 4))
    y = K.dwconv_fwd(x, w, 2, 4)
    ref = np.array([[[sum(x[b, 2 * l + t, c] * w[t, c] for t in range(3)) for c in range(4)]
                     for l in range(4)] for b in range(2)])
    np.testing.assert_allclose(y, ref, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 17, 120])
def test_front_ranks_paths_agree(n, rng):
    f = rng.integers(0, 6, size=(n, 2)).astype(float)  # many ties
    np.testing.assert_array_equal(K.front_ranks_np(f), K.front_ranks_nb(f))
    g = rng.normal(size=(n, 3))
    np.testing.assert_array_equal(K.front_ranks_np(g), K.front_ranks_nb(g))


def test_best_split_paths_agree(rng):
    for _ in range(20):
        x = rng.integers(0, 4, size=(60, 5)).astype(float)
        y = rng.normal(size=60)
        a, b = K.best_split_np(x, y, 5), K.best_split_nb(x, y, 5)
        assert a[0] == b[0]
        assert a[1] == pytest.approx(b[1])
        assert a[2] == pytest.approx(b[2], rel=1e-12)


def test_best_split_no_admissible():
    x = np.ones((12, 2))
    y = np.arange(12.0)
    assert K.best_split_np(x, y, 5)[0] == -1
    assert K.best_split_nb(x, y, 5)[0] == -1


def test_env_flag_selects_numpy():
    code = ("import desknas._kernels as K; "
            "print(K.USE_NUMBA, K.dwconv_fwd is K.dwconv_fwd_np)")
    env = {**os.environ, "DESKNAS_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out == ["False", "True"]
