"""Pure-numpy implementations of the hot kernels.

Same call signatures as the compiled module in ``_native.pyx``; the package
selects one of the two at import time (see ``kernels/__init__``).
"""
from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


def im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """Unfold [B,C,H,W] into [B, C*kh*kw, OH*OW] patch columns (zero padding)."""
    b, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(b, c * kh * kw, oh * ow)


def col2im(
    cols: np.ndarray,
    h: int,
    w: int,
    kh: int,
    kw: int,
    sh: int,
    sw: int,
    ph: int,
    pw: int,
) -> np.ndarray:
    """Adjoint of im2col: scatter-add [B, C*kh*kw, OH*OW] back to [B,C,H,W]."""
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    # Loop over the (small) kernel footprint; each slice-add is vectorized.
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, i, j]
    if ph or pw:
        out = out[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(out)


def _logaddexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    s = (
        np.where(np.isneginf(a), 0.0, np.exp(a - m_safe))
        + np.where(np.isneginf(b), 0.0, np.exp(b - m_safe))
        + np.where(np.isneginf(c), 0.0, np.exp(c - m_safe))
    )
    return np.where(np.isneginf(m), NEG_INF, m_safe + np.log(np.maximum(s, 1e-300)))


def ctc_forward_backward(log_probs: np.ndarray, labels: np.ndarray):
    """CTC negative log likelihood and its gradient w.r.t. log_probs.

    log_probs: [T, V] float64 log-softmax rows; labels: int32 target ids
    (blank = 0 excluded). Returns (loss, grad[T, V]).
    """
    t_len, v = log_probs.shape
    lab = np.asarray(labels, dtype=np.int64)
    s_len = 2 * len(lab) + 1
    ext = np.zeros(s_len, dtype=np.int64)
    ext[1::2] = lab

    # alpha
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = log_probs[0, 0]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    allow_skip = np.zeros(s_len, dtype=bool)
    allow_skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        left = np.concatenate(([NEG_INF], prev[:-1]))
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        skip = np.where(allow_skip, skip, NEG_INF)
        alpha[t] = _logaddexp3(stay, left, skip) + log_probs[t, ext]

    tail = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, s_len - 2])
    log_p = tail
    if np.isneginf(log_p):
        return float("inf"), np.zeros_like(log_probs)

    # beta
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, ext]
        stay = nxt
        right = np.concatenate((nxt[1:], [NEG_INF]))
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        skip = np.where(np.concatenate((allow_skip[2:], [False, False])), skip, NEG_INF)
        beta[t] = _logaddexp3(stay, right, skip)

    # posterior over extended states; grad of -log P w.r.t. log_probs is -posterior
    gamma = alpha + beta - log_p
    post = np.zeros((t_len, v))
    np.add.at(post, (np.arange(t_len)[:, None], ext[None, :]), np.exp(gamma))
    return float(-log_p), -post
