"""Synthesis by sampling the latent Gaussian, and a throughput harness."""
from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageError, ShapeError
from .flow import WaveGlow
from .signal import HOP, SAMPLE_RATE, AudioClip, mel_spectrogram
from .tensor import no_grad

GAUSSIAN_SAMPLER = "numpy Generator(PCG64), ziggurat standard_normal, scaled by sigma"
DEFAULT_SIGMA = 0.6


def output_length(frames: int, group: int) -> int:
    n = frames * HOP
    return n - n % group


def _mel_2d(model: WaveGlow, mel) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] != model.config.n_mels:
        raise ShapeError(f"mel must be [{model.config.n_mels}, frames], got {mel.shape}")
    return mel


def sample_latent(model: WaveGlow, n_samples: int, sigma: float = DEFAULT_SIGMA, seed: int = 0) -> np.ndarray:
    """z ~ N(0, sigma^2 I) with shape [1, group, n_samples / group]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    g = model.config.group
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, g, n_samples // g)) * sigma
    return z.astype(model.dtype)


def synthesize(model: WaveGlow, mel, sigma: float = DEFAULT_SIGMA, seed: int = 0,
               n_samples: int | None = None) -> AudioClip:
    """Invert the flow on a Gaussian draw; output is clamped to [-1, 1]."""
    mel = _mel_2d(model, mel)
    frames = mel.shape[1]
    if n_samples is None:
        n_samples = output_length(frames, model.config.group)
    if n_samples % model.config.group:
        raise ShapeError(f"n_samples={n_samples} is not a multiple of group={model.config.group}")
    if model.upsampler.covered(frames) < n_samples:
        raise CoverageError(f"mel has {frames} frames but {n_samples} samples need "
                            f"{model.upsampler.frames_needed(n_samples)} frames")
    z = sample_latent(model, n_samples, sigma, seed)
    with no_grad():
        audio = model.inverse(z, mel).data[0].astype(np.float64)
    clipped = float(np.mean(np.abs(audio) > 1.0))
    if clipped > 1e-3:
        warnings.warn(f"{100 * clipped:.2f}% of synthesized samples clipped to [-1, 1]")
    return AudioClip(np.clip(audio, -1.0, 1.0), SAMPLE_RATE)


@dataclass
class BenchReport:
    label: str
    samples: int
    seconds: float
    rate_khz: float
    realtime_factor: float
    repetitions: list[float] = field(default_factory=list)
    warmup_seconds: float = 0.0
    utterances: int = 1  # syntheses per repetition; samples counts all of them
    sampler: str = GAUSSIAN_SAMPLER

    def to_text(self) -> str:
        reps = ", ".join(f"{s:.4f}" for s in self.repetitions)
        per = f" ({self.utterances} utterances)" if self.utterances > 1 else ""
        return (f"{self.label}: {self.samples} samples{per} in {self.seconds:.4f} s (fastest of {len(self.repetitions)}) "
                f"-> {self.rate_khz:.2f} kHz, {self.realtime_factor:.3f}x real time [runs: {reps}]")

    def to_kv(self) -> str:
        d = asdict(self)
        d["repetitions"] = ",".join(repr(s) for s in self.repetitions)
        return "".join(f"{k}={v}\n" for k, v in d.items())

    def write(self, directory, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"bench_{self.label}"
        txt, kv = directory / f"{stem}.txt", directory / f"{stem}.kv"
        txt.write_text(self.to_text() + "\n", encoding="utf-8")
        kv.write_text(self.to_kv(), encoding="utf-8")
        return txt, kv


def _time_batch(model: WaveGlow, mel: np.ndarray, sigma: float, seed: int, utterances: int) -> tuple[float, int]:
    """Wall time and total samples for ``utterances`` back-to-back syntheses of ``mel``."""
    samples = 0
    t0 = time.perf_counter()
    for _ in range(utterances):
        samples += len(synthesize(model, mel, sigma, seed))
    return time.perf_counter() - t0, samples


def _report(label: str, samples: int, times: list[float], utterances: int) -> BenchReport:
    timed = times[1:]
    secs = min(timed)
    rate = samples / secs / 1000.0
    return BenchReport(label, samples, secs, rate, rate / (SAMPLE_RATE / 1000.0), timed, times[0], utterances)


def _check_reps(repetitions: int) -> None:
    if repetitions < 3:
        raise ValueError(f"repetitions must be >= 3 (one warm-up), got {repetitions}")


def benchmark(model: WaveGlow, mel, repetitions: int = 5, sigma: float = DEFAULT_SIGMA,
              seed: int = 0, label: str | None = None, utterances: int = 1) -> BenchReport:
    """Time ``synthesize``; the first repetition is a discarded warm-up.

    Each repetition synthesises the utterance ``utterances`` times in a row.
    The reported time is the fastest remaining repetition: scheduler and
    cache interference only ever add time, so the minimum is the most stable
    estimate of the intrinsic cost. Every repetition is kept in the report.
    """
    _check_reps(repetitions)
    mel = _mel_2d(model, mel)
    times, samples = [], 0
    for _ in range(repetitions):
        secs, samples = _time_batch(model, mel, sigma, seed, utterances)
        times.append(secs)
    return _report(label or f"{samples / utterances / SAMPLE_RATE:.2f}s", samples, times, utterances)


def bench_mel(seconds: float, seed: int = 0) -> np.ndarray:
    """Mel features of a synthetic vowel-like tone lasting ``seconds``."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    rng = np.random.default_rng(seed)
    x = sum(0.5 / k * np.sin(2 * np.pi * 140.0 * k * t) for k in range(1, 6)) * 0.5
    x = x + 0.005 * rng.standard_normal(n)
    return mel_spectrogram(x)[:, :max(1, n // HOP)]


def benchmark_lengths(model: WaveGlow, seconds=(1.0, 10.0), repetitions: int = 5,
                      sigma: float = DEFAULT_SIGMA, seed: int = 0) -> list[BenchReport]:
    """One report per utterance length, shortest first.

    Shorter utterances are repeated within a repetition so every length
    synthesises about as much audio as the longest, and repetitions of the
    different lengths are interleaved. Each length is then timed over similar
    wall-clock spans under the same machine conditions.
    """
    _check_reps(repetitions)
    lengths = sorted(seconds)
    mels = [_mel_2d(model, bench_mel(s, seed)) for s in lengths]
    counts = [max(1, round(lengths[-1] / s)) for s in lengths]
    times: list[list[float]] = [[] for _ in lengths]
    samples = [0] * len(lengths)
    for _ in range(repetitions):
        for i, (mel, count) in enumerate(zip(mels, counts)):
            secs, samples[i] = _time_batch(model, mel, sigma, seed, count)
            times[i].append(secs)
    return [_report(f"{s:g}s", n, t, c) for s, n, t, c in zip(lengths, samples, times, counts)]
