"""84-dimensional acoustic frames: 40 log-Mel energies, 40 MFCCs, energy, pitch.

Frame layout (row index in a feature sequence):

    0-39   log Mel filterbank energies
    40-79  MFCCs (orthonormal DCT-II of the log-Mel vector, all kept)
    80     log energy of the raw frame
    81     f0 in Hz (0 when unvoiced)
    82     delta f0
    83     NCCF at the chosen lag

The pitch tracker is a plain NCCF peak picker with 5-point median smoothing;
it does not do dynamic-programming lag tracking.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy.io import wavfile

N_MELS = 40
N_MFCC = 40
N_FEATURES = 84
IDX_ENERGY, IDX_F0, IDX_DF0, IDX_NCCF = 80, 81, 82, 83
LOG_FLOOR = 1e-10
VOICING_THRESHOLD = 0.6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("only single-channel audio is supported")


@dataclass(frozen=True)
class FrameSpec:
    window_s: float = 0.025
    shift_s: float = 0.010
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.shift_s > self.window_s:
            raise ValueError("frame shift longer than the window")

    @property
    def window(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))

    @property
    def shift(self) -> int:
        return int(round(self.shift_s * self.sample_rate_hz))

    @property
    def fft_size(self) -> int:
        n = 1
        while n < self.window:
            n *= 2
        return n


def _check_rate(w: Waveform, spec: FrameSpec) -> None:
    if w.sample_rate_hz != spec.sample_rate_hz:
        raise ValueError(f"waveform is {w.sample_rate_hz} Hz but the frame spec expects "
                         f"{spec.sample_rate_hz} Hz; resample first")


def n_frames(n_samples: int, spec: FrameSpec) -> int:
    if n_samples < spec.window:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one "
                         f"{spec.window}-sample window")
    return (n_samples - spec.window) // spec.shift + 1


def raw_frames(w: Waveform, spec: FrameSpec) -> np.ndarray:
    _check_rate(w, spec)
    count = n_frames(len(w.samples), spec)
    return sliding_window_view(w.samples, spec.window)[::spec.shift][:count]


def frame_signal(w: Waveform, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Hamming-windowed frames every ``spec.shift`` samples; the trailing partial frame is dropped."""
    return raw_frames(w, spec) * np.hamming(spec.window)


def fft_mag2(frame: np.ndarray, fft_size: int | None = None) -> np.ndarray:
    """|rfft|^2 of a zero-padded frame, fft_size // 2 + 1 bins."""
    frame = np.asarray(frame, dtype=np.float64)
    fft_size = fft_size or frame.shape[-1]
    if frame.shape[-1] > fft_size:
        raise ValueError("frame longer than FFT size")
    spec = np.fft.rfft(frame, n=fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_filters: int = N_MELS, sample_rate_hz: int = 16000,
                           low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    high_hz = high_hz or sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2))
    return edges[1:-1]


def mel_filterbank(n_filters: int = N_MELS, fft_size: int = 512, sample_rate_hz: int = 16000,
                   low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, peak weight 1.

    Returns an (n_filters, fft_size // 2 + 1) matrix. Triangles are evaluated
    at bin frequencies rather than snapped to bins, so narrow low filters
    still receive weight.
    """
    high_hz = high_hz or sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    fb = np.zeros((n_filters, freqs.size))
    for k in range(n_filters):
        lo, mid, hi = edges[k], edges[k + 1], edges[k + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def log_mfb(power_spectrum: np.ndarray, fb: np.ndarray) -> np.ndarray:
    power_spectrum = np.asarray(power_spectrum, dtype=np.float64)
    if power_spectrum.shape[-1] != fb.shape[1]:
        raise ValueError(f"spectrum has {power_spectrum.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return np.log(np.maximum(power_spectrum @ fb.T, LOG_FLOOR))


def mfcc(log_mfb_vec: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II over the last axis; no liftering, no mean normalisation."""
    v = np.asarray(log_mfb_vec, dtype=np.float64)
    if v.shape[-1] != N_MELS:
        raise ValueError(f"expected {N_MELS} log-Mel values, got {v.shape[-1]}")
    return sfft.dct(v, type=2, norm="ortho", axis=-1)


def inverse_mfcc(coeffs: np.ndarray) -> np.ndarray:
    return sfft.idct(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho", axis=-1)


# ---------------------------------------------------------------------------
# pitch
# ---------------------------------------------------------------------------


def default_lag_range(sample_rate_hz: int = 16000) -> tuple[int, int]:
    """Lags for a 50-500 Hz search band."""
    return sample_rate_hz // 500, sample_rate_hz // 50


def nccf_curve(frame: np.ndarray, lag_range: tuple[int, int], window: int | None = None) -> np.ndarray:
    """NCCF for every lag in ``[lag_min, lag_max]``.

    With ``window=None`` the sums run over the overlap ``t < len(frame) - lag``;
    otherwise over ``t < window`` and ``frame`` must hold ``window + lag_max`` samples.
    """
    x = np.asarray(frame, dtype=np.float64)
    lo, hi = lag_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad lag range {lag_range}")
    lags = np.arange(lo, hi + 1)
    if window is None:
        if hi >= len(x):
            raise ValueError("lag range exceeds frame length")
        out = np.zeros(lags.size)
        sq = np.concatenate([[0.0], np.cumsum(x * x)])
        for i, lag in enumerate(lags):
            n = len(x) - lag
            num = np.dot(x[:n], x[lag:lag + n])
            den = np.sqrt(sq[n] * (sq[lag + n] - sq[lag]))
            out[i] = num / den if den > 0 else 0.0
        return out
    if len(x) < window + hi:
        raise ValueError(f"frame needs {window + hi} samples for window {window} and lag {hi}")
    ref = x[:window]
    shifted = sliding_window_view(x[:window + hi], window)[lo:hi + 1]
    num = shifted @ ref
    e0 = ref @ ref
    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    e_lag = sq[lags + window] - sq[lags]
    den = np.sqrt(e0 * e_lag)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def _pick_peak(curve: np.ndarray, tolerance: float = 0.01) -> int:
    """Index of the earliest local maximum within ``tolerance`` of the global max.

    Preferring the shortest qualifying lag avoids sub-harmonic (octave-down) picks.
    """
    best = curve.max()
    n = curve.size
    for i in range(n):
        left = curve[i - 1] if i > 0 else -np.inf
        right = curve[i + 1] if i + 1 < n else -np.inf
        if curve[i] >= left and curve[i] >= right and curve[i] >= best - tolerance:
            return i
    return int(np.argmax(curve))


def nccf(frame: np.ndarray, lag_range: tuple[int, int], window: int | None = None) -> tuple[int, float]:
    """(best_lag, value); a silent frame yields the unvoiced result (0, 0.0)."""
    x = np.asarray(frame, dtype=np.float64)
    if not np.any(x):
        return 0, 0.0
    curve = nccf_curve(x, lag_range, window)
    if not np.any(curve):
        return 0, 0.0
    i = _pick_peak(curve)
    return lag_range[0] + i, float(curve[i])


def _refine_lag(curve: np.ndarray, i: int, lag_min: int) -> float:
    if 0 < i < curve.size - 1:
        a, b, c = curve[i - 1], curve[i], curve[i + 1]
        den = a - 2 * b + c
        if den < 0:
            return lag_min + i + 0.5 * (a - c) / den
    return float(lag_min + i)


def median_smooth(x: np.ndarray, width: int = 5) -> np.ndarray:
    if width <= 1 or len(x) == 0:
        return np.asarray(x, dtype=np.float64).copy()
    half = width // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), half, mode="edge")
    return np.median(sliding_window_view(padded, width), axis=1)


def pitch_track(w: Waveform, spec: FrameSpec = FrameSpec(), lag_range: tuple[int, int] | None = None,
                voicing_threshold: float = VOICING_THRESHOLD, smooth: int = 5):
    """Per-frame (f0, delta_f0, nccf) arrays aligned with :func:`frame_signal`.

    Each frame's NCCF uses the frame's own samples against the next
    ``lag_max`` samples of the signal (zero beyond the end).
    """
    _check_rate(w, spec)
    count = n_frames(len(w.samples), spec)
    lo, hi = lag_range or default_lag_range(w.sample_rate_hz)
    win, hop = spec.window, spec.shift
    padded = np.concatenate([w.samples, np.zeros(hi)])
    f0 = np.zeros(count)
    values = np.zeros(count)
    for i in range(count):
        buf = padded[i * hop:i * hop + win + hi]
        if not np.any(buf[:win]):
            continue
        curve = nccf_curve(buf, (lo, hi), window=win)
        j = _pick_peak(curve)
        values[i] = curve[j]
        if curve[j] >= voicing_threshold:
            f0[i] = w.sample_rate_hz / _refine_lag(curve, j, lo)
    f0 = median_smooth(f0, smooth)
    df0 = np.gradient(f0) if count > 1 else np.zeros(count)
    return f0, df0, values


def extract_features(w: Waveform, spec: FrameSpec = FrameSpec(),
                     fb: np.ndarray | None = None) -> np.ndarray:
    """Feature sequence of shape (84, n_frames)."""
    raw = raw_frames(w, spec)
    windowed = raw * np.hamming(spec.window)
    if fb is None:
        fb = mel_filterbank(N_MELS, spec.fft_size, spec.sample_rate_hz)
    power = fft_mag2(windowed, spec.fft_size)
    lm = log_mfb(power, fb)
    cc = mfcc(lm)
    energy = np.log(np.maximum((raw * raw).sum(axis=1), LOG_FLOOR))
    f0, df0, nc = pitch_track(w, spec)
    feats = np.concatenate([lm, cc, energy[:, None], f0[:, None], df0[:, None], nc[:, None]], axis=1)
    return feats.T.copy()


def read_wav(path: str | Path) -> Waveform:
    """Single-channel PCM (16-bit int or 32-bit float) WAV as samples in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, w: Waveform, dtype=np.int16) -> None:
    if dtype == np.int16:
        data = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(str(path), w.sample_rate_hz, data)
