"""Evaluation metrics: WER, sentence accuracy, STOI, and LPC log-likelihood ratio."""
from __future__ import annotations

import hashlib
import json

import numpy as np
from scipy.linalg import solve_toeplitz, toeplitz
from scipy.signal import resample_poly

from .dsp import Signal

# STOI constants (canonical parameters from the metric's source literature)
STOI_FS = 10_000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_NBANDS = 15
STOI_MIN_CF = 150.0
STOI_SEG = 30  # 30 frames = 384 ms
STOI_BETA = -15.0  # dB, clip bound
STOI_DYN_RANGE = 40.0  # dB, silent-frame removal

# LLR constants
LLR_ORDER = 10
LLR_FRAME_MS = 30.0
LLR_HOP_MS = 10.0
LLR_TRIM = 0.95


def _as_words(seq) -> list[str]:
    if isinstance(seq, str):
        return seq.split()
    return [str(w) for w in seq]


def edit_distance(ref: list[str], hyp: list[str]) -> int:
    """Word-level Levenshtein distance with unit costs (rolling rows)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    ref, hyp = _as_words(reference), _as_words(hypothesis)
    if not ref:
        raise ValueError("wer needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def sla(pairs) -> float:
    """Sentence-level accuracy over (reference, hypothesis) pairs, percent."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("sla needs a non-empty batch")
    hits = sum(_as_words(r) == _as_words(h) for r, h in pairs)
    return 100.0 * hits / len(pairs)


def _equalize(clean: Signal, processed: Signal) -> tuple[np.ndarray, np.ndarray, int]:
    if clean.sample_rate != processed.sample_rate:
        raise ValueError("signal pair must share a sample rate")
    n = min(len(clean), len(processed))
    trimmed = max(len(clean), len(processed)) - n
    return clean.samples[:n], processed.samples[:n], trimmed


def _thirdoct_band_matrix(nfft: int, fs: int) -> np.ndarray:
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    cfs = STOI_MIN_CF * 2.0 ** (np.arange(STOI_NBANDS) / 3.0)
    mat = np.zeros((STOI_NBANDS, freqs.size))
    for k, cf in enumerate(cfs):
        lo, hi = cf / 2 ** (1 / 6), cf * 2 ** (1 / 6)
        mat[k, (freqs >= lo) & (freqs < hi)] = 1.0
    return mat


def _stft_frames(x: np.ndarray) -> np.ndarray:
    n = (x.size - STOI_FRAME) // STOI_HOP + 1
    if n < 1:
        return np.zeros((0, STOI_FRAME))
    idx = np.arange(STOI_FRAME)[None, :] + STOI_HOP * np.arange(n)[:, None]
    return x[idx] * np.hanning(STOI_FRAME)[None, :]


def stoi(clean: Signal, processed: Signal) -> float:
    """Short-time objective intelligibility in [0, 1] (higher is better)."""
    x, y, _ = _equalize(clean, processed)
    min_samples = int(np.ceil(0.384 * clean.sample_rate))
    if x.size < min_samples:
        raise ValueError(f"stoi needs >= 384 ms of audio, got {x.size / clean.sample_rate:.3f} s")
    x = resample_poly(x, STOI_FS, clean.sample_rate)
    y = resample_poly(y, STOI_FS, clean.sample_rate)

    # drop frames more than 40 dB below the loudest clean frame
    xf, yf = _stft_frames(x), _stft_frames(y)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + 1e-300)
    keep = energy > energy.max() - STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    if xf.shape[0] < STOI_SEG:
        raise ValueError("stoi needs >= 384 ms of active speech after silence removal")

    band = _thirdoct_band_matrix(STOI_NFFT, STOI_FS)
    xs = np.sqrt(band @ (np.abs(np.fft.rfft(xf, STOI_NFFT, axis=1)) ** 2).T)  # [bands, frames]
    ys = np.sqrt(band @ (np.abs(np.fft.rfft(yf, STOI_NFFT, axis=1)) ** 2).T)

    clip_gain = 10 ** (-STOI_BETA / 20)
    scores = []
    for m in range(STOI_SEG, xs.shape[1] + 1):
        xseg = xs[:, m - STOI_SEG : m]
        yseg = ys[:, m - STOI_SEG : m]
        alpha = np.linalg.norm(xseg, axis=1, keepdims=True) / (
            np.linalg.norm(yseg, axis=1, keepdims=True) + 1e-300
        )
        yn = np.minimum(yseg * alpha, xseg * (1 + clip_gain))
        xc = xseg - xseg.mean(axis=1, keepdims=True)
        yc = yn - yn.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + 1e-300
        scores.append((xc * yc).sum(axis=1) / denom)
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def _lpc(r: np.ndarray) -> np.ndarray:
    """Autocorrelation-method LPC: returns [1, -a1, ..., -ap] row."""
    a = solve_toeplitz(r[:-1], -r[1:])
    return np.concatenate(([1.0], a))


def llr(clean: Signal, processed: Signal) -> float:
    """LPC log-likelihood ratio (lower is better); mean of the lowest 95% of
    per-frame ratios, zero-energy frames skipped."""
    x, y, _ = _equalize(clean, processed)
    sr = clean.sample_rate
    frame = int(round(LLR_FRAME_MS / 1000 * sr))
    hop = int(round(LLR_HOP_MS / 1000 * sr))
    if x.size < frame:
        raise ValueError(f"llr needs at least one {LLR_FRAME_MS:.0f} ms frame")
    win = np.hanning(frame)
    vals = []
    skipped = 0
    for start in range(0, x.size - frame + 1, hop):
        xf = x[start : start + frame] * win
        yf = y[start : start + frame] * win
        rx = np.correlate(xf, xf, "full")[frame - 1 : frame + LLR_ORDER]
        ry = np.correlate(yf, yf, "full")[frame - 1 : frame + LLR_ORDER]
        if rx[0] < 1e-12 or ry[0] < 1e-12:
            skipped += 1
            continue
        rx = rx.copy()
        ry = ry.copy()
        rx[0] *= 1 + 1e-9  # tiny white-noise floor keeps the Toeplitz solvable
        ry[0] *= 1 + 1e-9
        a_c = _lpc(rx)
        a_p = _lpc(ry)
        r_mat = toeplitz(rx)
        num = float(a_p @ r_mat @ a_p)
        den = float(a_c @ r_mat @ a_c)
        if den <= 0:
            skipped += 1
            continue
        # the clean LPC minimizes the quadratic form, so the ratio is >= 1 up
        # to roundoff; floor at zero
        vals.append(max(np.log(num / den), 0.0))
    if not vals:
        raise ValueError(f"llr found no usable frames ({skipped} skipped)")
    vals = np.sort(vals)
    n_keep = max(1, int(round(LLR_TRIM * len(vals))))
    return float(np.mean(vals[:n_keep]))


def metric_record(metric: str, value: float, n: int, params: dict) -> dict:
    blob = json.dumps(params, sort_keys=True).encode()
    return {
        "metric": metric,
        "value": float(value),
        "n": int(n),
        "params_fingerprint": hashlib.sha256(blob).hexdigest()[:16],
    }
