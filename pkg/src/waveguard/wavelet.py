"""Framed complex-wavelet analysis, power spectrograms, and inversion.

Analysis correlates each 50 ms frame (hop = half a frame) against a bank of
complex oscillators on a dyadic frequency grid, windowed by one raised-cosine
envelope spanning the frame:

    coef[k, n] = 2^(rho_k/2) * sum_j x[n*hop + j] * conj(psi_k[j])
    psi_k[j]   = pi^(-1/4) * env[j] * exp(i * theta_k * (j - frame/2))

with theta_k = omega0 * 2^rho_k the dilated oscillation rate. The envelope is
fixed per frame rather than dilated with the scale: the Hann pair
(frame, hop = frame/2) is an exact partition of unity, which is what makes
magnitude+phase analysis invertible at this hop. Scale-center frequencies are
geometrically spaced (uniform in rho) from 50 Hz to 0.95 * Nyquist.

Inversion solves the least-squares problem min_x ||A(x) - coef|| with
conjugate gradients on the normal equations (minimum-norm solution). The
classic overlap-add reconstruction weighted by the frame-operator diagonal is
available as ``overlap_add_invert``; it is only a coarse approximation here
because the log-spaced atoms are far from orthogonal.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dsp import Signal

LOG_POWER_FLOOR = 1e-10
FULL_GEOMETRY = (128, 128, 3)
DESK_GEOMETRY = (32, 32, 1)
F_MIN_HZ = 50.0
F_MAX_FRACTION = 0.95


class TooShortError(ValueError):
    """Signal shorter than one analysis frame."""


class GeometryError(ValueError):
    """Incompatible spectrogram/scalogram geometry."""


@dataclass(frozen=True)
class WaveletConfig:
    sample_rate: int = 16_000
    frame_ms: float = 50.0
    overlap: float = 0.5
    n_scales: int = 32
    omega0: float = 6.0

    def __post_init__(self):
        if not 0 < self.overlap < 1:
            raise ValueError("overlap must be in (0, 1)")
        if self.n_scales < 8:
            raise ValueError("n_scales must be >= 8")
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be positive")

    @property
    def frame(self) -> int:
        return int(round(self.frame_ms / 1000 * self.sample_rate))

    @property
    def hop(self) -> int:
        return int(round(self.frame * (1 - self.overlap)))

    @property
    def center_freqs(self) -> np.ndarray:
        f_max = F_MAX_FRACTION * self.sample_rate / 2
        return np.geomspace(F_MIN_HZ, f_max, self.n_scales)

    @property
    def rho(self) -> np.ndarray:
        """Dyadic scale exponents: theta_k = omega0 * 2^rho_k rad/sample."""
        theta = 2 * np.pi * self.center_freqs / self.sample_rate
        return np.log2(theta / self.omega0)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame:
            raise TooShortError(
                f"signal of {n_samples} samples is shorter than one {self.frame}-sample frame"
            )
        return int(np.ceil((n_samples - self.frame) / self.hop)) + 1


FULL_CONFIG = WaveletConfig(n_scales=64)
DESK_CONFIG = WaveletConfig(n_scales=32)


@lru_cache(maxsize=8)
def _bank(cfg: WaveletConfig) -> np.ndarray:
    """Kernel matrix M [n_scales, frame] including the 2^(rho/2) prefactor."""
    frame = cfg.frame
    j = np.arange(frame)
    env = 0.5 * (1 - np.cos(2 * np.pi * j / frame))  # periodic Hann: exact OLA
    theta = cfg.omega0 * np.exp2(cfg.rho)
    phase = np.outer(theta, j - frame / 2)
    amp = np.exp2(cfg.rho / 2) * np.pi**-0.25
    return amp[:, None] * env[None, :] * np.exp(1j * phase)


def kernel_bank(cfg: WaveletConfig) -> np.ndarray:
    """Read-only view of the analysis kernels (used by the transcriber)."""
    return _bank(cfg)


@dataclass(frozen=True)
class ComplexScalogram:
    coefficients: np.ndarray  # complex [n_scales, n_frames]
    config: WaveletConfig
    source_length: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients.view(np.float64))):
            raise ValueError("scalogram coefficients must be finite")
        expect = self.config.n_frames(self.source_length)
        if self.coefficients.shape != (self.config.n_scales, expect):
            raise GeometryError(
                f"coefficients {self.coefficients.shape} != (n_scales, n_frames) "
                f"= ({self.config.n_scales}, {expect})"
            )


@dataclass(frozen=True)
class Spectrogram:
    """Log-compressed, min-max-normalized power image in [0, 1].

    norm_meta = (log_floor, max): log_floor is the minimum of the log10 power
    image, max the linear power at its maximum (> 0 always, because the floor
    1e-10 is added before the log).
    """

    pixels: np.ndarray  # [H, W, C]
    norm_meta: tuple[float, float]

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise GeometryError(f"pixels must be [H,W,C], got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < -1e-9 or self.pixels.max() > 1 + 1e-9):
            raise ValueError("pixels must lie in [0, 1]")
        if self.norm_meta[1] <= 0:
            raise ValueError("norm_meta.max must be positive")

    @property
    def geometry(self) -> tuple[int, int, int]:
        return self.pixels.shape


def _frames(x: np.ndarray, cfg: WaveletConfig) -> np.ndarray:
    n = cfg.n_frames(x.size)
    need = (n - 1) * cfg.hop + cfg.frame
    padded = np.zeros(need)
    padded[: x.size] = x
    idx = np.arange(cfg.frame)[None, :] + cfg.hop * np.arange(n)[:, None]
    return padded[idx]


def dwt_forward(x: Signal, cfg: WaveletConfig = DESK_CONFIG) -> ComplexScalogram:
    frames = _frames(np.asarray(x.samples, dtype=np.float64), cfg)
    coef = frames @ _bank(cfg).conj().T  # [n_frames, n_scales]
    return ComplexScalogram(np.ascontiguousarray(coef.T), cfg, len(x))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear interpolation with corner alignment."""
    h, w = img.shape
    def axis_coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=int), np.zeros(n_out, dtype=int)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return pos - lo, lo, hi
    fy, y0, y1 = axis_coords(h, out_h)
    fx, x0, x1 = axis_coords(w, out_w)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]


def power_spectrogram(
    s: ComplexScalogram, geometry: tuple[int, int, int] | None = None
) -> Spectrogram:
    """|coef|^2 -> log10 -> min-max to [0,1]; optional bilinear resize to a
    profile geometry; C > 1 replicates the single channel."""
    power = np.abs(s.coefficients) ** 2
    logp = np.log10(power + LOG_POWER_FLOOR)
    lo, hi = float(logp.min()), float(logp.max())
    if hi - lo < 1e-12:
        pixels = np.zeros_like(logp)  # degenerate all-constant rule
    else:
        pixels = (logp - lo) / (hi - lo)
    if geometry is not None:
        h, w, c = geometry
        pixels = bilinear_resize(pixels, h, w)
    else:
        c = 1
    pixels = np.repeat(pixels[:, :, None], c, axis=2)
    return Spectrogram(pixels, (lo, 10.0**hi))


def denormalize_power(mag: Spectrogram) -> np.ndarray:
    """Invert the log/min-max normalization back to linear power [H, W]."""
    log_floor, lin_max = mag.norm_meta
    span = np.log10(lin_max) - log_floor
    logp = mag.pixels[:, :, 0] * span + log_floor
    return np.maximum(10.0**logp - LOG_POWER_FLOOR, 0.0)


def _padded_len(cfg: WaveletConfig, n_frames: int) -> int:
    return (n_frames - 1) * cfg.hop + cfg.frame


def _frame_diagonal(cfg: WaveletConfig, n_frames: int) -> np.ndarray:
    """Diagonal of A^H A: overlap-added squared kernel magnitudes."""
    d = (np.abs(_bank(cfg)) ** 2).sum(axis=0)
    return _overlap_add(np.broadcast_to(d, (n_frames, cfg.frame)), cfg, n_frames)


def _overlap_add(rows: np.ndarray, cfg: WaveletConfig, n_frames: int) -> np.ndarray:
    """Sum frame rows into a signal. With hop = frame/2 the even frames tile
    the line disjointly and so do the odd ones, so two raveled adds suffice;
    other overlaps fall back to a strided scatter-add."""
    need = _padded_len(cfg, n_frames)
    out = np.zeros(need, dtype=rows.dtype)
    if 2 * cfg.hop == cfg.frame:
        even = rows[0::2]
        out[: even.shape[0] * cfg.frame] += even.ravel()
        odd = rows[1::2]
        if odd.shape[0]:
            out[cfg.hop : cfg.hop + odd.shape[0] * cfg.frame] += odd.ravel()
    else:
        idx = _frame_index(cfg.frame, cfg.hop, n_frames)
        np.add.at(out, idx.ravel(), rows.ravel())
    return out


@lru_cache(maxsize=32)
def _frame_index(frame: int, hop: int, n_frames: int) -> np.ndarray:
    return np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]


@lru_cache(maxsize=8)
def _bank_conj_t(cfg: WaveletConfig) -> np.ndarray:
    return np.ascontiguousarray(_bank(cfg).conj().T)


def _analysis_padded(xp: np.ndarray, cfg: WaveletConfig, n_frames: int) -> np.ndarray:
    idx = _frame_index(cfg.frame, cfg.hop, n_frames)
    return xp[idx] @ _bank_conj_t(cfg)  # [n_frames, n_scales]


def _adjoint(coef_nk: np.ndarray, cfg: WaveletConfig, n_frames: int) -> np.ndarray:
    contrib = coef_nk @ _bank(cfg)  # [n_frames, frame]
    return _overlap_add(contrib, cfg, n_frames).real


def overlap_add_invert(coef: np.ndarray, cfg: WaveletConfig, source_length: int) -> np.ndarray:
    """Quick approximate inverse: overlap-add of scale-wise reconstructions
    weighted by the frame-operator diagonal. Coarse (the log-spaced atoms are
    far from orthogonal); ``least_squares_invert`` is the accurate path."""
    n_frames = coef.shape[1]
    diag = _frame_diagonal(cfg, n_frames)
    diag = np.maximum(diag, 1e-8 * diag.max())
    x = _adjoint(np.ascontiguousarray(coef.T), cfg, n_frames) / diag
    return x[:source_length]


def least_squares_invert(
    coef: np.ndarray,
    cfg: WaveletConfig,
    source_length: int,
    warm_start: np.ndarray | None = None,
    rtol: float = 1e-9,
    max_iter: int = 800,
) -> np.ndarray:
    """min_x ||A(x) - coef||_F by conjugate gradients on the normal equations.

    Started from zero (or a previous solution), the iterates stay inside the
    analysis operator's row space, so CG converges to the minimum-norm
    least-squares solution; seeding with the diagonal-weighted overlap-add
    estimate would inject a null-space component that caps reconstruction
    fidelity, which is why it is exposed separately as
    ``overlap_add_invert``. CG monotonically decreases ||A(x) - coef||, so a
    truncated solve is still safe for the phase-retrieval alternation.
    """
    n_frames = coef.shape[1]
    need = _padded_len(cfg, n_frames)
    b = _adjoint(np.ascontiguousarray(coef.T), cfg, n_frames)

    def apply_s(v):
        return _adjoint(_analysis_padded(v, cfg, n_frames), cfg, n_frames)

    if warm_start is None:
        x = np.zeros(need)
        r = b.copy()
    else:
        ws = np.asarray(warm_start, float)
        x = np.zeros(need)
        x[: min(need, ws.size)] = ws[: min(need, ws.size)]
        r = b - apply_s(x)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0 and warm_start is None:
        return np.zeros(source_length)
    p = r.copy()
    rr = float(r @ r)
    for _ in range(max_iter):
        if np.sqrt(rr) <= rtol * max(b_norm, 1e-300):
            break
        sp = apply_s(p)
        denom = float(p @ sp)
        if denom <= 0:
            break
        alpha = rr / denom
        x = x + alpha * p
        r = r - alpha * sp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    out = np.zeros(source_length)
    m = min(source_length, x.size)
    out[:m] = x[:m]
    return out


def invert_with_phase(
    mag: Spectrogram, phase: ComplexScalogram, cfg: WaveletConfig | None = None
) -> Signal:
    """De-normalize the magnitude image, reattach the given phase, invert."""
    cfg = phase.config if cfg is None else cfg
    k, n = phase.coefficients.shape
    pixels = mag.pixels[:, :, 0]
    if pixels.shape != (k, n):
        pixels = bilinear_resize(pixels, k, n)
        mag = Spectrogram(np.clip(pixels, 0, 1)[:, :, None], mag.norm_meta)
    power = denormalize_power(mag)
    if power.shape != (k, n):
        raise GeometryError(f"magnitude {power.shape} incompatible with phase {(k, n)}")
    ang = np.angle(phase.coefficients)
    coef = np.sqrt(power) * np.exp(1j * ang)
    samples = least_squares_invert(coef, cfg, phase.source_length)
    sig, _ = Signal.from_array(samples, cfg.sample_rate)
    return sig


def phase_retrieval_invert(
    mag: Spectrogram,
    cfg: WaveletConfig,
    iters: int = 100,
    seed: int = 0,
    source_length: int | None = None,
    return_residuals: bool = False,
):
    """Griffin-Lim-style alternation on the wavelet frame from random phase.

    Repeats [least-squares invert -> re-analyze -> keep analysis phase,
    replace magnitudes]; the spectral-convergence residual is non-increasing
    (up to solver tolerance) because each half-step is a metric projection.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    k, n = mag.pixels.shape[0], mag.pixels.shape[1]
    if k != cfg.n_scales:
        raise GeometryError(f"magnitude has {k} scale rows, config wants {cfg.n_scales}")
    if source_length is None:
        source_length = (n - 1) * cfg.hop + cfg.frame
    target = np.sqrt(denormalize_power(mag))
    target_norm = np.linalg.norm(target)
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x617])
    phi = rng.uniform(0.0, 2 * np.pi, size=(k, n))
    coef = target * np.exp(1j * phi)
    if target_norm == 0.0:
        zero = np.zeros(source_length)
        return (Signal(zero, cfg.sample_rate), []) if return_residuals else Signal(zero, cfg.sample_rate)
    residuals = []
    x = least_squares_invert(coef, cfg, source_length, max_iter=400)
    n_frames = n
    need = _padded_len(cfg, n_frames)
    for _ in range(iters):
        xp = np.zeros(need)
        xp[:source_length] = x
        analysis = _analysis_padded(xp, cfg, n_frames).T  # [K, N]
        residuals.append(float(np.linalg.norm(np.abs(analysis) - target) / target_norm))
        ang = np.where(np.abs(analysis) > 0, np.angle(analysis), 0.0)
        coef = target * np.exp(1j * ang)
        x = least_squares_invert(coef, cfg, source_length, warm_start=x, max_iter=25)
    sig, _ = Signal.from_array(x, cfg.sample_rate)
    return (sig, residuals) if return_residuals else sig


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    reference = np.asarray(reference, float)
    estimate = np.asarray(estimate, float)
    err = reference - estimate
    denom = float(err @ err)
    if denom == 0.0:
        return float("inf")
    return 10.0 * np.log10(float(reference @ reference) / denom)


# ------------------------------------------------------------ file formats

SPG_MAGIC = b"SPG1"
SCL_MAGIC = b"SCL1"


class FormatError(ValueError):
    pass


def write_spg(path, spg: Spectrogram) -> None:
    h, w, c = spg.geometry
    with open(path, "wb") as fh:
        fh.write(SPG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(struct.pack("<ff", float(spg.norm_meta[0]), float(spg.norm_meta[1])))
        fh.write(np.ascontiguousarray(spg.pixels, dtype="<f4").tobytes())


def read_spg(path) -> Spectrogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPG_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SPG_MAGIC!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        log_floor, lin_max = struct.unpack("<ff", fh.read(8))
        data = np.frombuffer(fh.read(4 * h * w * c), dtype="<f4")
        if data.size != h * w * c:
            raise FormatError("truncated pixel payload")
        pixels = np.clip(data.astype(np.float64).reshape(h, w, c), 0.0, 1.0)
    return Spectrogram(pixels, (float(log_floor), float(lin_max)))


def write_scl(path, s: ComplexScalogram) -> None:
    k, n = s.coefficients.shape
    cfg = s.config
    with open(path, "wb") as fh:
        fh.write(SCL_MAGIC)
        fh.write(struct.pack("<III", k, n, s.source_length))
        fh.write(struct.pack("<Ifff", cfg.sample_rate, cfg.frame_ms, cfg.overlap, cfg.omega0))
        inter = np.empty((k, n, 2), dtype="<f4")
        inter[:, :, 0] = s.coefficients.real
        inter[:, :, 1] = s.coefficients.imag
        fh.write(inter.tobytes())


def read_scl(path) -> ComplexScalogram:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SCL_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SCL_MAGIC!r}")
        k, n, source_length = struct.unpack("<III", fh.read(12))
        sr, frame_ms, overlap, omega0 = struct.unpack("<Ifff", fh.read(16))
        data = np.frombuffer(fh.read(8 * k * n), dtype="<f4")
        if data.size != 2 * k * n:
            raise FormatError("truncated coefficient payload")
        cfg = WaveletConfig(
            sample_rate=int(sr),
            frame_ms=float(np.round(frame_ms, 6)),
            overlap=float(np.round(overlap, 6)),
            n_scales=int(k),
            omega0=float(np.round(omega0, 6)),
        )
        arr = data.astype(np.float64).reshape(k, n, 2)
        coef = arr[:, :, 0] + 1j * arr[:, :, 1]
    return ComplexScalogram(coef, cfg, int(source_length))
