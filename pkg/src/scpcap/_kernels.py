"""Hot inner loops, each with a numba version and a pure-numpy version.

Set ``SCPCAP_DISABLE_NUMBA=1`` before import to force the numpy path (also
used automatically when numba is not importable). Integer kernels agree
exactly between paths, float kernels to rounding; the tests compare them.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SCPCAP_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

_NJIT = dict(cache=True, nogil=True)


# ---------------------------------------------------------------------------
# directed co-occurrence pair enumeration
# ---------------------------------------------------------------------------

def _pair_codes_numpy(tokens, offsets, window, vocab_size):
    sent_id = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    chunks = []
    for d in range(1, window + 1):
        same = sent_id[:-d] == sent_id[d:]
        chunks.append(tokens[:-d][same] * vocab_size + tokens[d:][same])
    if not chunks:
        return np.zeros(0, np.int64)
    return np.concatenate(chunks).astype(np.int64)


def _pair_codes_py(tokens, offsets, window, vocab_size):
    n_sent = offsets.shape[0] - 1
    total = 0
    for s in range(n_sent):
        n = offsets[s + 1] - offsets[s]
        for i in range(n):
            total += min(window, n - 1 - i)
    out = np.empty(total, np.int64)
    pos = 0
    for s in range(n_sent):
        lo = offsets[s]
        hi = offsets[s + 1]
        for i in range(lo, hi):
            stop = min(hi, i + window + 1)
            for j in range(i + 1, stop):
                out[pos] = tokens[i] * vocab_size + tokens[j]
                pos += 1
    return out


# ---------------------------------------------------------------------------
# relation-tagged bilinear attention scores: s[b,i,j] = h[b,i] . W[tag] . h[b,j]
# tags < 0 mark non-edges and get score 0.
# ---------------------------------------------------------------------------

def _tag_bilinear_numpy(h, w, tags):
    out = np.zeros(tags.shape, dtype=np.float64)
    for t in range(w.shape[0]):
        mask = tags == t
        if mask.any():
            out += mask * ((h @ w[t]) @ np.swapaxes(h, -1, -2))
    return out


def _tag_bilinear_backward_numpy(grad, h, w, tags):
    dh = np.zeros_like(h)
    dw = np.zeros_like(w)
    ht = np.swapaxes(h, -1, -2)
    for t in range(w.shape[0]):
        g = grad * (tags == t)
        if not g.any():
            continue
        dh += g @ (h @ w[t].T)
        dh += np.swapaxes(g, -1, -2) @ (h @ w[t])
        dw[t] = (ht @ g @ h).sum(axis=0)
    return dh, dw


def _project_py(h, w):
    # hw[t, b, i] = h[b, i] @ w[t], one matmul per tag over the flattened batch
    b_n, k, d = h.shape
    n_t = w.shape[0]
    flat = h.reshape(b_n * k, d)
    hw = np.empty((n_t, b_n, k, d))
    for t in range(n_t):
        hw[t] = np.dot(flat, w[t]).reshape(b_n, k, d)
    return hw


def _tag_bilinear_py(h, w, tags):
    b_n, k, d = h.shape
    hw = _project_py(h, w)
    out = np.zeros((b_n, k, k))
    for b in range(b_n):
        for i in range(k):
            for j in range(k):
                t = tags[b, i, j]
                if t < 0:
                    continue
                acc = 0.0
                for q in range(d):
                    acc += hw[t, b, i, q] * h[b, j, q]
                out[b, i, j] = acc
    return out


def _tag_bilinear_backward_py(grad, h, w, tags):
    # s_ij = h_i W_t h_j:  dh_i += g_ij (W_t h_j),  dh_j += g_ij (h_i W_t),
    # dW_t = sum_i h_i (x) r_it with r_it = sum_j g_ij h_j over edges tagged t
    b_n, k, d = h.shape
    n_t = w.shape[0]
    hw = _project_py(h, w)
    wt = np.ascontiguousarray(w.transpose(0, 2, 1))
    wh = _project_py(h, wt)
    dh = np.zeros_like(h)
    dw = np.zeros_like(w)
    r = np.zeros((n_t, b_n, k, d))
    for b in range(b_n):
        for i in range(k):
            for j in range(k):
                t = tags[b, i, j]
                g = grad[b, i, j]
                if t < 0 or g == 0.0:
                    continue
                for q in range(d):
                    dh[b, i, q] += g * wh[t, b, j, q]
                    dh[b, j, q] += g * hw[t, b, i, q]
                    r[t, b, i, q] += g * h[b, j, q]
    flat_t = np.ascontiguousarray(h.reshape(b_n * k, d).T)
    for t in range(n_t):
        dw[t] = np.dot(flat_t, r[t].reshape(b_n * k, d))
    return dh, dw


if numba is not None:
    _pair_codes_numba = numba.njit(**_NJIT)(_pair_codes_py)
    _project_py = numba.njit(**_NJIT)(_project_py)
    _tag_bilinear_numba = numba.njit(**_NJIT)(_tag_bilinear_py)
    _tag_bilinear_backward_numba = numba.njit(**_NJIT)(_tag_bilinear_backward_py)
else:  # pragma: no cover
    _pair_codes_numba = _tag_bilinear_numba = _tag_bilinear_backward_numba = None


def pair_codes(tokens, offsets, window, vocab_size, use_numba=None):
    """Encode every ordered pair (tokens[i], tokens[j]), 0 < j - i <= window,
    within one sentence, as ``first * vocab_size + second``.

    ``offsets`` are sentence boundaries into the flat ``tokens`` array. The
    order of codes differs between paths; callers count them, which does not
    depend on order.
    """
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _pair_codes_numba(tokens, offsets, int(window), int(vocab_size))
    return _pair_codes_numpy(tokens, offsets, int(window), int(vocab_size))


def tag_bilinear(h, w, tags, use_numba=None):
    h = np.ascontiguousarray(h, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    tags = np.ascontiguousarray(tags, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _tag_bilinear_numba(h, w, tags)
    return _tag_bilinear_numpy(h, w, tags)


def tag_bilinear_backward(grad, h, w, tags, use_numba=None):
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    tags = np.ascontiguousarray(tags, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _tag_bilinear_backward_numba(grad, h, w, tags)
    return _tag_bilinear_backward_numpy(grad, h, w, tags)
