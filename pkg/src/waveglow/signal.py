"""Audio I/O and spectral front end.

Frame geometry is fixed at FFT size 1024, hop 256, Hann window 1024 with
centred (reflect-padded) frames, so a clip of L samples yields 1 + L // 256
frames. Mel features use 80 HTK-scale triangular filters spanning 0 Hz to
Nyquist, area normalised, followed by natural-log compression with a 1e-5
floor.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, FormatError, ShapeError

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
WIN = 1024
N_MELS = 80
LOG_FLOOR = 1e-5

MEL_MAGIC = b"WGMEL\x00\x00\x00"
MEL_VERSION = 1


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.max(np.abs(self.samples)) > 1 + 1e-6:
            raise DomainError(f"samples exceed [-1, 1] (peak {np.max(np.abs(self.samples)):.6f})")

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


def _samples(audio) -> np.ndarray:
    if isinstance(audio, AudioClip):
        return audio.samples
    return np.asarray(audio, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------------------
# WAV


def load_wav(path, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a 16-bit PCM mono WAV; integers are divided by 32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as e:
        raise FormatError(f"{path}: malformed RIFF/WAVE data ({e})") from e
    if channels != 1:
        raise FormatError(f"{path}: channels={channels}, expected mono")
    if width != 2:
        raise FormatError(f"{path}: sample_width={8 * width} bits, expected 16")
    if rate != sample_rate:
        raise FormatError(f"{path}: sample_rate={rate}, expected {sample_rate} (resampling unsupported)")
    if len(raw) % 2:
        raise FormatError(f"{path}: data chunk has odd byte length {len(raw)}")
    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / 32768.0, rate)


def save_wav(path, clip: AudioClip) -> None:
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# STFT


def hann_window(n: int = WIN) -> np.ndarray:
    """Periodic Hann window (sums to n / 2)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(length: int, hop: int = HOP) -> int:
    return 1 + length // hop


def stft(audio, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """One-sided complex STFT, shape [n_fft // 2 + 1, frames]."""
    x = _samples(audio)
    if x.size < 1:
        raise ShapeError("stft of an empty signal")
    xp = np.pad(x, n_fft // 2, mode="reflect")
    frames = sliding_window_view(xp, n_fft)[::hop]
    return np.fft.rfft(frames * hann_window(n_fft), axis=1).T


def istft(spec: np.ndarray, length: int | None = None, hop: int = HOP) -> np.ndarray:
    """Least-squares inverse of ``stft``.

    Windowed frames are overlap-added in the padded domain, then every padded
    position is folded back onto the source sample it was reflected from;
    numerator and summed squared window are folded alike before dividing.
    """
    n_fft = 2 * (spec.shape[0] - 1)
    nfr = spec.shape[1]
    if length is None:
        length = (nfr - 1) * hop
    win = hann_window(n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    total = (nfr - 1) * hop + n_fft
    buf = np.zeros(total)
    wsum = np.zeros(total)
    w2 = win * win
    for i in range(nfr):
        buf[i * hop:i * hop + n_fft] += frames[i]
        wsum[i * hop:i * hop + n_fft] += w2
    src = np.pad(np.arange(length), n_fft // 2, mode="reflect")
    used = min(total, src.size)
    num = np.bincount(src[:used], weights=buf[:used], minlength=length)
    den = np.bincount(src[:used], weights=wsum[:used], minlength=length)
    return num / np.where(den > 1e-10, den, 1.0)


# ---------------------------------------------------------------------------
# mel


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None, norm: str = "area") -> np.ndarray:
    """Triangular HTK-mel filters, shape [n_mels, n_fft // 2 + 1].

    norm="area" scales each filter by 2 / bandwidth; norm="sum" makes each
    row sum to one.
    """
    if n_mels >= n_fft // 2:
        raise ShapeError(f"n_mels={n_mels} must be below n_fft/2={n_fft // 2}")
    if fmax is None:
        fmax = sample_rate / 2
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(hz)
    ramps = hz[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    if norm == "area":
        weights *= (2.0 / (hz[2:] - hz[:-2]))[:, None]
    elif norm == "sum":
        weights /= weights.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown filter normalisation {norm!r}")
    return weights


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Centre frequency in Hz of each filter."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


_FB_CACHE: dict = {}


def mel_spectrogram(audio, norm: str = "area") -> np.ndarray:
    """log(max(filterbank @ |stft|, 1e-5)), shape [80, frames]."""
    key = norm
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(norm=norm)
    mag = np.abs(stft(audio))
    return np.log(np.maximum(_FB_CACHE[key] @ mag, LOG_FLOOR))


# ---------------------------------------------------------------------------
# Griffin-Lim


def spectral_distance(y, magnitude: np.ndarray) -> float:
    """||(|STFT(y)| - M)||_2 / ||M||_2."""
    ref = np.linalg.norm(magnitude)
    return float(np.linalg.norm(np.abs(stft(y)) - magnitude) / (ref if ref > 0 else 1.0))


def griffin_lim(magnitude: np.ndarray, iterations: int = 60, length: int | None = None,
                callback=None) -> AudioClip:
    """Phase recovery from a [513, frames] magnitude, starting at zero phase.

    Each iteration re-analyses the current signal and keeps only its phase.
    ``callback(i, y)`` sees the unnormalised signal after every inverse step
    (i = 0 is the zero-phase start).
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if np.any(magnitude < 0):
        raise DomainError("griffin_lim magnitude must be non-negative")
    if length is None:
        length = (magnitude.shape[1] - 1) * HOP
    y = istft(magnitude.astype(np.complex128), length)
    if callback is not None:
        callback(0, y)
    for i in range(iterations):
        spec = stft(y)
        phase = np.exp(1j * np.angle(spec))
        y = istft(magnitude * phase, length)
        if callback is not None:
            callback(i + 1, y)
    peak = np.max(np.abs(y)) if y.size else 0.0
    if peak >= 1e-9:
        y = y * (0.99 / peak)
    else:
        y = np.zeros_like(y)
    return AudioClip(y)


# ---------------------------------------------------------------------------
# mel container


def save_mel(path, mel: np.ndarray) -> None:
    """16-byte header (magic, u32 version, u32 reserved), two u64 dims, row-major f32."""
    mel = np.ascontiguousarray(mel, dtype="<f4")
    if mel.ndim != 2:
        raise ShapeError(f"mel must be 2-D, got {mel.shape}")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC + struct.pack("<II", MEL_VERSION, 0))
        fh.write(struct.pack("<QQ", *mel.shape))
        fh.write(mel.tobytes())


def load_mel(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 32 or raw[:8] != MEL_MAGIC:
        raise FormatError(f"{path}: bad mel magic")
    version, _ = struct.unpack("<II", raw[8:16])
    if version != MEL_VERSION:
        raise FormatError(f"{path}: mel version={version}, expected {MEL_VERSION}")
    rows, cols = struct.unpack("<QQ", raw[16:32])
    body = raw[32:]
    if len(body) != 4 * rows * cols:
        raise FormatError(f"{path}: body has {len(body)} bytes, dims {rows}x{cols} need {4 * rows * cols}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
