"""Toy CTC speech-to-text model over wavelet spectrogram frames.

Feature extraction, the CTC loss (log-space forward algorithm with an
autodiff bridge), greedy decoding, and a small convolutional model with its
training loop. The differentiable featurizer mirrors
``power_spectrogram(dwt_forward(x))`` at native geometry exactly, so attack
gradients flow from the loss all the way to signal samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import wavelet
from .dsp import LEXICON, Signal
from .kernels import ctc_forward_backward
from .nn import (
    Adam,
    BatchNorm2d,
    Conv2d,
    Dense,
    Module,
    NumericError,
    Tensor,
    load_ckpt,
    no_grad,
    save_ckpt,
)

BLANK = 0


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned within the available frame count."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...] = ("<blank>",) + LEXICON

    def __post_init__(self):
        if self.tokens[BLANK] != "<blank>":
            raise ValueError("blank token must sit at index 0")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode_words(self, word_ids) -> list[int]:
        return [int(w) + 1 for w in word_ids]

    def decode_tokens(self, token_ids) -> list[int]:
        return [int(t) - 1 for t in token_ids]

    def text(self, token_ids) -> str:
        return " ".join(self.tokens[t] for t in token_ids)


def min_alignable_frames(target: list[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def featurize(x: Signal, cfg: wavelet.WaveletConfig = wavelet.DESK_CONFIG) -> np.ndarray:
    """[T, F] feature matrix: native power-spectrogram columns, one per frame."""
    s = wavelet.dwt_forward(x, cfg)
    spg = wavelet.power_spectrogram(s)  # native geometry [K, N, 1]
    return np.ascontiguousarray(spg.pixels[:, :, 0].T)


def featurize_t(x: Tensor, n_samples: int, cfg: wavelet.WaveletConfig = wavelet.DESK_CONFIG) -> Tensor:
    """Differentiable twin of :func:`featurize` for a 1-D sample tensor."""
    bank = wavelet.kernel_bank(cfg)
    n_frames = cfg.n_frames(n_samples)
    frames = x.frames1d(cfg.frame, cfg.hop, n_frames)  # [N, F]
    re = frames @ Tensor(np.ascontiguousarray(bank.real.T))
    im = frames @ Tensor(np.ascontiguousarray(-bank.imag.T))  # conj
    power = re.square() + im.square()
    logp = (power + wavelet.LOG_POWER_FLOOR).log() * (1.0 / np.log(10.0))
    lo = logp.min()
    span = logp.max() - lo
    return (logp - lo) / (span + 1e-12)  # [N, K] = [T, F]


def ctc_loss_t(logits: Tensor, target) -> Tensor:
    """CTC negative log likelihood of ``target`` given per-frame logits [T, V]."""
    target = [int(t) for t in target]
    t_len, v = logits.shape
    if any(not 0 < t < v for t in target):
        raise ValueError(f"target ids must be in 1..{v - 1}")
    if t_len < min_alignable_frames(target):
        raise InfeasibleTargetError(
            f"target of {len(target)} tokens needs >= {min_alignable_frames(target)} frames, have {t_len}"
        )
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss, grad_lp = ctc_forward_backward(log_probs, np.asarray(target, dtype=np.int64))
    softmax = np.exp(log_probs)

    def bwd(g):
        # chain through log-softmax: rows of grad_lp sum to -1
        glogit = grad_lp - softmax * grad_lp.sum(axis=1, keepdims=True)
        logits._accumulate(g * glogit.astype(logits.data.dtype))

    return Tensor._make(np.array(loss, dtype=logits.data.dtype), (logits,), "ctc", bwd)


def ctc_loss_value(logits: np.ndarray, target) -> float:
    """Loss-only CTC evaluation on raw logits (black-box query surface)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.asarray([int(t) for t in target], dtype=np.int64)
    if logits.shape[0] < min_alignable_frames(list(target)):
        raise InfeasibleTargetError("target longer than alignable")
    loss, _ = ctc_forward_backward(log_probs, target)
    return loss


def ctc_greedy_decode(logits: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.argmax(logits, axis=1)
    out, prev = [], BLANK
    for t in best:
        if t != prev and t != BLANK:
            out.append(int(t))
        prev = t
    return out


class _ConvBlock(Module):
    def __init__(self, cin, cout, rng):
        self.conv = Conv2d(cin, cout, 3, rng, stride=(2, 1), padding=1)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x, training=False):
        return self.bn(self.conv(x), training).relu()


class TranscriberNet(Module):
    """Frozen input whitening, 3 conv blocks over [1, F, T] feature images,
    then 2 dense per-frame heads.

    The whitening layer standardizes each spectrogram row by training-corpus
    statistics (variance floored at 0.05) and is not trainable; it plays the
    role of the usual feature-normalization frontend.
    """

    CHANNELS = (8, 16, 32)
    HIDDEN = 64
    ROW_STD_FLOOR = 0.05

    def __init__(self, n_features: int, vocab_size: int, rng: np.random.Generator):
        self.n_features = n_features
        self.row_mean = np.zeros(n_features, dtype=np.float32)
        self.row_std = np.ones(n_features, dtype=np.float32)
        chans = [1, *self.CHANNELS]
        self.blocks = [_ConvBlock(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        freq_out = n_features // 2 ** len(self.CHANNELS)
        self.flat_dim = self.CHANNELS[-1] * freq_out
        self.fc1 = Dense(self.flat_dim, self.HIDDEN, rng)
        self.fc2 = Dense(self.HIDDEN, vocab_size, rng)

    def fit_whitening(self, feature_mats) -> None:
        stacked = np.concatenate([np.asarray(f) for f in feature_mats], axis=0)
        self.row_mean[...] = stacked.mean(axis=0)
        self.row_std[...] = np.maximum(stacked.std(axis=0), self.ROW_STD_FLOOR)

    def __call__(self, feats: Tensor, training: bool = False) -> Tensor:
        """feats [B, T, F] -> logits [B, T, V]."""
        b, t, f = feats.shape
        z = (feats - Tensor(self.row_mean)) / Tensor(self.row_std)
        h = z.transpose(0, 2, 1).reshape(b, 1, f, t)
        for blk in self.blocks:
            h = blk(h, training)
        h = h.reshape(b, self.flat_dim, t).transpose(0, 2, 1)  # [B, T, flat]
        h = self.fc1(h.reshape(b * t, self.flat_dim)).relu()
        return self.fc2(h).reshape(b, t, -1)


@dataclass
class TranscriberModel:
    net: TranscriberNet
    vocab: Vocab
    wavelet_cfg: wavelet.WaveletConfig
    metadata: dict = field(default_factory=dict)

    def logits(self, x: Signal) -> np.ndarray:
        feats = featurize(x, self.wavelet_cfg)
        with no_grad():
            out = self.net(Tensor(feats[None]), training=False)
        return out.data[0]

    def logits_t(self, x: Tensor, n_samples: int) -> Tensor:
        feats = featurize_t(x, n_samples, self.wavelet_cfg)
        return self.net(feats.reshape(1, *feats.shape), training=False)[0]

    def transcribe_tokens(self, x: Signal) -> list[int]:
        return ctc_greedy_decode(self.logits(x))

    def save(self, ckpt_path, sidecar_path) -> None:
        save_ckpt(ckpt_path, self.net.state_dict())
        sidecar = {
            "vocab": list(self.vocab.tokens),
            "features": {
                "n_scales": self.wavelet_cfg.n_scales,
                "frame_ms": self.wavelet_cfg.frame_ms,
                "overlap": self.wavelet_cfg.overlap,
                "sample_rate": self.wavelet_cfg.sample_rate,
                "omega0": self.wavelet_cfg.omega0,
            },
            "metadata": self.metadata,
        }
        with open(sidecar_path, "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(ckpt_path, sidecar_path) -> "TranscriberModel":
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
        f = sidecar["features"]
        cfg = wavelet.WaveletConfig(
            sample_rate=f["sample_rate"],
            frame_ms=f["frame_ms"],
            overlap=f["overlap"],
            n_scales=f["n_scales"],
            omega0=f["omega0"],
        )
        vocab = Vocab(tuple(sidecar["vocab"]))
        net = TranscriberNet(cfg.n_scales, vocab.size, np.random.default_rng(0))
        net.load_state_dict(load_ckpt(ckpt_path))
        return TranscriberModel(net, vocab, cfg, sidecar["metadata"])


def transcribe(model: TranscriberModel, x: Signal) -> str:
    tokens = model.transcribe_tokens(x)
    return " ".join(model.vocab.tokens[t] for t in tokens)


def train_transcriber(
    corpus,
    epochs: int = 30,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 32,
    holdout_frac: float = 0.2,
    cfg: wavelet.WaveletConfig = wavelet.DESK_CONFIG,
) -> TranscriberModel:
    """Train on a corpus of utterances; returns the model with per-epoch mean
    CTC losses and the held-out greedy WER recorded in ``metadata``."""
    from .metrics import wer

    utts = [getattr(item, "utterance", item) for item in corpus]
    if not utts:
        raise ValueError("corpus must be non-empty")
    vocab = Vocab()
    feats = [featurize(u.signal, cfg) for u in utts]
    targets = [vocab.encode_words(u.words) for u in utts]
    for f_mat, tgt in zip(feats, targets):
        if f_mat.shape[0] < min_alignable_frames(tgt):
            raise InfeasibleTargetError("corpus contains an unalignable transcript")

    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xA52])
    order = rng.permutation(len(utts))
    n_hold = int(round(holdout_frac * len(utts)))
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]

    net = TranscriberNet(cfg.n_scales, vocab.size, np.random.default_rng([seed & 0x7FFFFFFF, 0x1417]))
    net.fit_whitening([feats[i] for i in train_idx])
    opt = Adam(net.parameters(), lr=lr)
    epoch_losses: list[float] = []

    buckets: dict[int, list[int]] = {}
    for i in train_idx:
        buckets.setdefault(feats[i].shape[0], []).append(int(i))

    for epoch in range(epochs):
        erng = np.random.default_rng([seed & 0x7FFFFFFF, 0xE0, epoch])
        batches = []
        for t_len in sorted(buckets):
            idxs = np.array(buckets[t_len])
            idxs = idxs[erng.permutation(len(idxs))]
            batches.extend(idxs[i : i + batch_size] for i in range(0, len(idxs), batch_size))
        batch_order = erng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in batch_order:
            idxs = batches[bi]
            fb = Tensor(np.stack([feats[i] for i in idxs]))
            logits = net(fb, training=True)
            losses = [ctc_loss_t(logits[j], targets[i]) for j, i in enumerate(idxs)]
            loss = losses[0]
            for extra in losses[1:]:
                loss = loss + extra
            loss = loss / float(len(losses))
            try:
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise NumericError(f"training diverged at epoch {epoch}: loss is not finite")
            total += loss.item() * len(idxs)
            count += len(idxs)
        epoch_losses.append(total / count)

    model = TranscriberModel(net, vocab, cfg, {})
    holdout_wers = []
    for i in hold_idx:
        ref = [LEXICON[w] for w in utts[i].words]
        hyp = transcribe(model, utts[i].signal).split()
        holdout_wers.append(wer(ref, hyp))
    model.metadata = {
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "epoch_losses": epoch_losses,
        "final_loss": epoch_losses[-1],
        "holdout_wer": float(np.mean(holdout_wers)) if holdout_wers else None,
        "holdout_size": int(n_hold),
    }
    return model
