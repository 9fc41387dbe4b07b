import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpcap import _kernels as K


def _sentences(rng, n, vocab):
    lengths = rng.integers(0, 9, size=n)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return rng.integers(0, vocab, size=offsets[-1]), offsets


def _tagged(rng, b=3, k=5, d=4, n_tags=3):
    h = rng.normal(size=(b, k, d))
    w = rng.normal(size=(n_tags, d, d))
    tags = rng.integers(-1, n_tags, size=(b, k, k))
    return h, w, tags


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_pair_codes_paths_agree(seed, window):
    tokens, offsets = _sentences(np.random.default_rng(seed), 12, 9)
    a = np.sort(K.pair_codes(tokens, offsets, window, 9, use_numba=True))
    b = np.sort(K.pair_codes(tokens, offsets, window, 9, use_numba=False))
    assert np.array_equal(a, b)


def test_pair_codes_small_case():
    codes = K.pair_codes([1, 2, 3, 4, 5], [0, 3, 5], 2, 10, use_numba=False)
    assert sorted(codes.tolist()) == [12, 13, 23, 45]


def test_pair_codes_rejects_window():
    with pytest.raises(ValueError):
        K.pair_codes([1, 2], [0, 2], 0, 3)


@pytest.mark.parametrize("seed", range(5))
def test_tag_bilinear_paths_agree(seed):
    h, w, tags = _tagged(np.random.default_rng(seed))
    a = K.tag_bilinear(h, w, tags, use_numba=True)
    b = K.tag_bilinear(h, w, tags, use_numba=False)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert np.all(a[tags < 0] == 0)


def test_tag_bilinear_direct_formula():
    h, w, tags = _tagged(np.random.default_rng(9), b=1, k=3)
    out = K.tag_bilinear(h, w, tags)
    for i in range(3):
        for j in range(3):
            t = tags[0, i, j]
            want = 0.0 if t < 0 else h[0, i] @ w[t] @ h[0, j]
            assert out[0, i, j] == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_tag_bilinear_backward_paths_agree(seed):
    rng = np.random.default_rng(seed)
    h, w, tags = _tagged(rng)
    g = rng.normal(size=tags.shape)
    for x, y in zip(K.tag_bilinear_backward(g, h, w, tags, use_numba=True),
                    K.tag_bilinear_backward(g, h, w, tags, use_numba=False)):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-11)


def test_backward_is_vjp_of_forward():
    rng = np.random.default_rng(3)
    h, w, tags = _tagged(rng, b=2, k=4, d=3)
    g = rng.normal(size=tags.shape)
    dh, dw = K.tag_bilinear_backward(g, h, w, tags)
    eps = 1e-6
    for arr, grad in ((h, dh), (w, dw)):
        idx = tuple(rng.integers(0, s) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        up = (K.tag_bilinear(h, w, tags) * g).sum()
        arr[idx] = old - eps
        down = (K.tag_bilinear(h, w, tags) * g).sum()
        arr[idx] = old
        assert (up - down) / (2 * eps) == pytest.approx(grad[idx], rel=1e-6, abs=1e-9)


def test_env_flag_selects_numpy_path():
    code = "from scpcap import _kernels as K; print(K.USE_NUMBA)"
    env = dict(os.environ, SCPCAP_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
