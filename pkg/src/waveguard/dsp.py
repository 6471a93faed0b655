"""Waveform types, the synthetic word lexicon, loudness, playback simulation.

Everything here is deterministic given explicit seeds: the corpus generator,
the dither, the synthetic room responses, and the playback noise all draw
from ``numpy.random.default_rng`` seeded with integer lists.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16_000
WORD_MS = 300
GAP_MS = 50
FADE_MS = 20
WORD_PEAK = 0.5
DITHER_STD = 0.002

# 10-word lexicon; word w is a 3-component harmonic stack on a per-word
# fundamental. Fundamentals are geometrically spaced so the wavelet scale
# grid resolves every word.
LEXICON = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
_F0 = 220.0 * (1.18 ** np.arange(10))
_HARMONICS = (1.0, 2.0, 3.0)
_HARMONIC_AMPS = (1.0, 0.5, 0.25)


class VocabularyError(ValueError):
    """A word id outside the fixed lexicon."""


class FilterError(ValueError):
    """A malformed playback filter."""


class WavFormatError(ValueError):
    """A WAV file violating the RIFF/PCM16/mono contract."""


def clip_to_unit(samples: np.ndarray) -> tuple[np.ndarray, int]:
    """Clip to [-1, 1]; returns (clipped, number of samples touched)."""
    n_clipped = int(np.count_nonzero((samples > 1.0) | (samples < -1.0)))
    if n_clipped:
        samples = np.clip(samples, -1.0, 1.0)
    return samples, n_clipped


@dataclass(frozen=True)
class Signal:
    """A mono PCM waveform. Samples are finite and within [-1, 1].

    ``clip_count`` records how many samples were clipped by whatever
    operation produced this signal (0 for freshly synthesized audio).
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_count: int = field(default=0, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"Signal expects 1-D samples, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Signal samples must be finite")
        if arr.size and np.max(np.abs(arr)) > 1.0 + 1e-9:
            raise ValueError("Signal samples must lie in [-1, 1]; clip first")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @staticmethod
    def from_array(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> tuple["Signal", int]:
        """Build a Signal, clipping out-of-range values; returns (signal, clip count)."""
        clipped, n = clip_to_unit(np.asarray(samples, dtype=np.float64))
        return Signal(clipped, sample_rate, clip_count=n), n


@dataclass(frozen=True)
class Utterance:
    signal: Signal
    words: tuple[int, ...]
    transcript: str

    def __post_init__(self):
        if not all(0 <= w < len(LEXICON) for w in self.words):
            raise VocabularyError(f"word ids out of range: {self.words}")
        if not 1 <= len(self.words) <= 5:
            raise ValueError("utterances carry 1..5 words")


@dataclass(frozen=True)
class EotFilterSet:
    """Playback simulation: room responses, additive noise level, pass band."""

    impulse_responses: tuple[np.ndarray, ...]
    noise_std: float
    band: tuple[float, float]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.impulse_responses:
            raise FilterError("impulse response list must be non-empty")
        irs = []
        for h in self.impulse_responses:
            h = np.asarray(h, dtype=np.float64)
            if h.size == 0:
                raise FilterError("empty impulse response")
            peak = np.max(np.abs(h))
            if not np.isclose(peak, 1.0, atol=1e-9):
                raise FilterError(f"impulse response peak magnitude {peak} != 1")
            h = h.copy()
            h.flags.writeable = False
            irs.append(h)
        object.__setattr__(self, "impulse_responses", tuple(irs))
        lo, hi = self.band
        if not 0 < lo < hi < self.sample_rate / 2:
            raise FilterError(f"band {self.band} must satisfy 0 < low < high < Nyquist")
        if self.noise_std < 0:
            raise FilterError("noise_std must be >= 0")


def _word_tone(word_id: int, sr: int) -> np.ndarray:
    n = int(round(WORD_MS / 1000 * sr))
    t = np.arange(n) / sr
    f0 = _F0[word_id]
    tone = np.zeros(n)
    for mult, amp in zip(_HARMONICS, _HARMONIC_AMPS):
        tone += amp * np.sin(2 * np.pi * f0 * mult * t)
    fade = int(round(FADE_MS / 1000 * sr))
    ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
    tone[:fade] *= ramp
    tone[-fade:] *= ramp[::-1]
    return tone


def synth_utterance(word_ids, seed: int, sample_rate: int = SAMPLE_RATE) -> Utterance:
    """Synthesize one utterance: 300 ms harmonic words, 50 ms gaps, dithered,
    peak-normalized to 0.5. Bit-identical for identical (word_ids, seed)."""
    word_ids = tuple(int(w) for w in word_ids)
    for w in word_ids:
        if not 0 <= w < len(LEXICON):
            raise VocabularyError(f"unknown word id {w}")
    if not 1 <= len(word_ids) <= 5:
        raise ValueError("synth_utterance takes 1..5 words")
    gap = np.zeros(int(round(GAP_MS / 1000 * sample_rate)))
    parts = []
    for i, w in enumerate(word_ids):
        if i:
            parts.append(gap)
        parts.append(_word_tone(w, sample_rate))
    x = np.concatenate(parts)
    rng = np.random.default_rng([seed & 0x7FFFFFFF, *word_ids, 0x5EED])
    x = x + rng.normal(0.0, DITHER_STD, size=x.size)
    x *= WORD_PEAK / np.max(np.abs(x))
    sig, _ = Signal.from_array(x, sample_rate)
    return Utterance(sig, word_ids, " ".join(LEXICON[w] for w in word_ids))


def loudness_db(x: Signal) -> float:
    """Peak loudness 20*log10(max |x|); -inf for the all-zero signal."""
    if len(x) == 0:
        raise ValueError("loudness_db needs a non-empty signal")
    peak = float(np.max(np.abs(x.samples)))
    if peak == 0.0:
        return float("-inf")
    return 20.0 * np.log10(peak)


def relative_loudness_db(delta: Signal, x_orig: Signal) -> float:
    """Distortion of a perturbation relative to its carrier (dB)."""
    return loudness_db(delta) - loudness_db(x_orig)


def bandpass_fir(band: tuple[float, float], sample_rate: int = SAMPLE_RATE, taps: int = 401) -> np.ndarray:
    """Linear-phase Hamming-windowed sinc band-pass."""
    lo, hi = band
    m = np.arange(taps) - (taps - 1) / 2
    def lowpass(fc):
        return 2 * fc / sample_rate * np.sinc(2 * fc * m / sample_rate)
    h = (lowpass(hi) - lowpass(lo)) * np.hamming(taps)
    return h


def apply_bandpass(samples: np.ndarray, band, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    h = bandpass_fir(band, sample_rate)
    full = np.convolve(samples, h, mode="full")
    start = (len(h) - 1) // 2
    return full[start : start + samples.size]


def apply_eot(x: Signal, f: EotFilterSet, t_index: int, seed: int) -> Signal:
    """Simulated playback: band-pass, convolve with the chosen room response
    (full convolution truncated to the input length), add Gaussian noise."""
    if not 0 <= t_index < len(f.impulse_responses):
        raise FilterError(f"t_index {t_index} out of range for {len(f.impulse_responses)} responses")
    y = apply_bandpass(x.samples, f.band, x.sample_rate)
    h = f.impulse_responses[t_index]
    y = np.convolve(y, h, mode="full")[: len(x)]
    if f.noise_std > 0:
        rng = np.random.default_rng([seed & 0x7FFFFFFF, t_index, 0xE07])
        y = y + rng.normal(0.0, f.noise_std, size=y.size)
    sig, _ = Signal.from_array(y, x.sample_rate)
    return sig


def make_synthetic_rirs(
    count: int,
    rt60_ms: float,
    seed: int,
    noise_std: float = 0.001,
    band: tuple[float, float] = (1000.0, 4000.0),
    sample_rate: int = SAMPLE_RATE,
) -> EotFilterSet:
    """Exponentially decaying white-noise room responses, unit peak each."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if rt60_ms <= 0:
        raise ValueError("rt60_ms must be positive")
    rt60 = rt60_ms / 1000.0
    n = int(round(1.25 * rt60 * sample_rate)) + 1
    decay = np.exp(-6.91 * np.arange(n) / (rt60 * sample_rate))
    irs = []
    for k in range(count):
        rng = np.random.default_rng([seed & 0x7FFFFFFF, k, 0x121])
        h = rng.standard_normal(n) * decay
        h /= np.max(np.abs(h))
        irs.append(h)
    return EotFilterSet(tuple(irs), noise_std=noise_std, band=band, sample_rate=sample_rate)


# --------------------------------------------------------------------- WAV I/O

def write_wav(path, x: Signal) -> None:
    """RIFF/WAVE, PCM 16-bit LE, mono."""
    pcm = np.round(x.samples * 32767.0).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(data)))
        fh.write(b"WAVEfmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, x.sample_rate, x.sample_rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)


def read_wav(path) -> Signal:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise WavFormatError(f"bad RIFF magic: {raw[:4]!r}")
    if raw[8:12] != b"WAVE":
        raise WavFormatError(f"bad WAVE tag: {raw[8:12]!r}")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if data is None:
        raise WavFormatError("missing data chunk")
    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag != 1:
        raise WavFormatError(f"unsupported encoding tag {tag} (want PCM=1)")
    if channels != 1:
        raise WavFormatError(f"unsupported channel count {channels} (mono only)")
    if bits != 16:
        raise WavFormatError(f"unsupported bit depth {bits} (16-bit only)")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    clipped, n = clip_to_unit(pcm)
    return Signal(clipped, rate, clip_count=n)


# ---------------------------------------------------------------- corpus

@dataclass(frozen=True)
class CorpusItem:
    id: str
    utterance: Utterance
    seed: int


def generate_corpus(size: int, seed: int) -> list[CorpusItem]:
    """Deterministic synthetic corpus: uniformly 2..5 words per utterance."""
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    items = []
    for i in range(size):
        rng = np.random.default_rng([seed & 0x7FFFFFFF, i, 0xC0])
        n_words = int(rng.integers(2, 6))
        words = [int(w) for w in rng.integers(0, len(LEXICON), size=n_words)]
        item_seed = int(rng.integers(0, 2**31 - 1))
        utt = synth_utterance(words, item_seed)
        items.append(CorpusItem(f"utt{i:05d}", utt, item_seed))
    return items


def write_corpus(dirpath, items: list[CorpusItem]) -> None:
    """WAVs plus a JSON manifest of {id, wav_path, transcript, word_ids, seed}."""
    from pathlib import Path

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for item in items:
        wav_path = d / f"{item.id}.wav"
        write_wav(wav_path, item.utterance.signal)
        manifest.append(
            {
                "id": item.id,
                "wav_path": str(wav_path.name),
                "transcript": item.utterance.transcript,
                "word_ids": list(item.utterance.words),
                "seed": item.seed,
            }
        )
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_corpus(dirpath) -> list[CorpusItem]:
    from pathlib import Path

    d = Path(dirpath)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    items = []
    for rec in manifest:
        sig = read_wav(d / rec["wav_path"])
        utt = Utterance(sig, tuple(rec["word_ids"]), rec["transcript"])
        items.append(CorpusItem(rec["id"], utt, rec["seed"]))
    return items
