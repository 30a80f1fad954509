"""Waveform to log-Mel spectrogram featurization at exactly 100 frames per second.

Frames are center-aligned: frame k is the 25 ms Hamming-windowed slice centered
at sample k * 160 (10 ms hop at 16 kHz), with reflect padding at the edges, so
a d-second waveform always yields round(100 * d) frames.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 16_000
FRAME_RATE = 100
HOP = SAMPLE_RATE // FRAME_RATE          # 160 samples
WINDOW = int(0.025 * SAMPLE_RATE)        # 400 samples
N_FFT = 512
MEL_BINS = 128
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"FBNK"
CACHE_VERSION = 1


class UnsupportedFormatError(ValueError):
    """Audio file is not the 16-bit PCM WAV this pipeline consumes."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64 amplitudes in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("waveform must be non-empty")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray       # [mel bins x frames] log energies
    original_frames: int     # frames before any padding (round(100 * t))
    padded_frames: int       # frames after pad_or_truncate (100 * T)
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.original_frames > self.padded_frames:
            raise ValueError("original_frames cannot exceed padded_frames")
        if not np.isfinite(self.values).all():
            raise ValueError("spectrogram values must be finite")


def decode_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV; stereo input keeps the first channel only."""
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            n = f.getnframes()
            raw = f.readframes(n)
    except wave.Error as e:
        raise UnsupportedFormatError(f"{path}: {e}") from e
    if width != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(raw) < n * channels * 2:
        raise IOError(f"{path}: truncated payload")
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels)
    return Waveform(data[:, 0].astype(np.float64) / 32768.0, rate)


def resample(wave_in: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling; exact identity when rates match."""
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == wave_in.sample_rate:
        return Waveform(wave_in.samples.copy(), wave_in.sample_rate)
    out = resample_poly(wave_in.samples, target_rate, wave_in.sample_rate)
    want = int(round(wave_in.samples.size * target_rate / wave_in.sample_rate))
    if out.size > want:
        out = out[:want]
    elif out.size < want:
        out = np.concatenate([out, np.zeros(want - out.size)])
    return Waveform(out, target_rate)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect padding that tolerates pad width >= len(x) - 1 by re-reflecting."""
    y = x
    while pad > 0:
        p = min(pad, y.size - 1)
        y = np.pad(y, p, mode="reflect")
        pad -= p
    return y


def mel_filterbank(n_mels: int = MEL_BINS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular unit-peak filters spaced on the HTK mel scale, [n_mels x n_fft//2+1]."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    points = mel_inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs - lo) / np.maximum(center - lo, 1e-12)
    falling = (hi - freqs) / np.maximum(hi - center, 1e-12)
    return np.clip(np.minimum(rising, falling), 0.0, 1.0)


def mel_filter_centers(n_mels: int = MEL_BINS, fmin: float = FMIN,
                       fmax: float = FMAX) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return mel_inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))[1:-1]


_FILTERS: np.ndarray | None = None


def _filters() -> np.ndarray:
    global _FILTERS
    if _FILTERS is None:
        _FILTERS = mel_filterbank()
    return _FILTERS


def log_mel_spectrogram(wave_in: Waveform) -> Spectrogram:
    """128-bin log-Mel features; frame count is exactly round(100 * duration)."""
    if wave_in.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {wave_in.sample_rate}")
    x = wave_in.samples
    if x.size < HOP:
        raise ValueError(f"waveform shorter than one hop ({HOP} samples)")
    n_frames = int(round(x.size / HOP))
    half = WINDOW // 2
    padded = _reflect_pad(x, half)
    idx = np.arange(n_frames)[:, None] * HOP + np.arange(WINDOW)[None, :]
    frames = padded[idx] * np.hamming(WINDOW)
    spectrum = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spectrum @ _filters().T
    values = np.log(np.maximum(mel, LOG_FLOOR)).T  # [bins x frames]
    return Spectrogram(values, original_frames=n_frames, padded_frames=n_frames)


def pad_or_truncate(spec: Spectrogram, max_seconds: float,
                    fill: float = 0.0) -> Spectrogram:
    """Right-pad with `fill` (or truncate) to exactly 100 * max_seconds frames."""
    if max_seconds <= 0:
        raise ValueError("max_seconds must be positive")
    target = int(round(FRAME_RATE * max_seconds))
    n = spec.values.shape[1]
    if n == target:
        return replace(spec, values=spec.values.copy(), padded_frames=target)
    if n > target:
        return Spectrogram(spec.values[:, :target].copy(),
                           original_frames=min(spec.original_frames, target),
                           padded_frames=target)
    out = np.full((spec.values.shape[0], target), fill, dtype=np.float64)
    out[:, :n] = spec.values
    return Spectrogram(out, original_frames=spec.original_frames, padded_frames=target)


@dataclass(frozen=True)
class FeatureStats:
    mean: float
    std: float


def compute_stats(specs) -> FeatureStats:
    """Mean and std over all unpadded cells; computed once on the training split."""
    cells = np.concatenate([s.values[:, :s.original_frames].ravel() for s in specs])
    return FeatureStats(mean=float(cells.mean()), std=float(cells.std()))


def normalize_spectrogram(spec: Spectrogram, stats: FeatureStats) -> Spectrogram:
    if stats.std <= 0:
        raise ValueError("normalization std must be positive")
    values = (spec.values - stats.mean) / (2.0 * stats.std)
    return replace(spec, values=values)


def denormalize_spectrogram(spec: Spectrogram, stats: FeatureStats) -> Spectrogram:
    return replace(spec, values=spec.values * (2.0 * stats.std) + stats.mean)


def save_spectrogram(spec: Spectrogram, path) -> None:
    """Little-endian f32 cache with a {magic, version, bins, frames, original} header."""
    bins, frames = spec.values.shape
    header = CACHE_MAGIC + struct.pack("<IIII", CACHE_VERSION, bins, frames,
                                       spec.original_frames)
    with open(path, "wb") as f:
        f.write(header)
        f.write(spec.values.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a spectrogram cache")
    version, bins, frames, original = struct.unpack("<IIII", blob[4:20])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    values = np.frombuffer(blob[20:], dtype="<f4").astype(np.float64)
    if values.size != bins * frames:
        raise IOError(f"{path}: payload size mismatch")
    return Spectrogram(values.reshape(bins, frames), original_frames=original,
                       padded_frames=frames)
