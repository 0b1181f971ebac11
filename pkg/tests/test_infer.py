import warnings

import numpy as np
import pytest

from waveglow import tensor as T
from waveglow.errors import CoverageError, ShapeError
from waveglow.flow import WaveGlow, model_forward, preset, randomize
from waveglow.infer import (GAUSSIAN_SAMPLER, BenchReport, bench_mel, benchmark, benchmark_lengths,
                            output_length, sample_latent, synthesize)
from waveglow.signal import HOP

# an untrained model at sigma 0.6 clips a good share of samples; that is expected here
pytestmark = pytest.mark.filterwarnings("ignore:.*clipped")


@pytest.fixture(scope="module")
def micro():
    return randomize(WaveGlow(preset("micro"), seed=0), seed=1, scale=0.05)


def mel_for(frames, seed=0):
    return np.random.default_rng(seed).normal(-5, 1, (80, frames))


def test_output_length():
    assert output_length(10, 8) == 2560
    assert output_length(3, 3) == 768
    assert output_length(1, 5) == 255


def test_sigma_zero_seed_independent(micro):
    mel = mel_for(6)
    a = synthesize(micro, mel, sigma=0.0, seed=1).samples
    b = synthesize(micro, mel, sigma=0.0, seed=2).samples
    np.testing.assert_array_equal(a, b)
    assert len(a) == 6 * HOP


def test_seeded_reproducible(micro):
    mel = mel_for(6)
    a = synthesize(micro, mel, sigma=0.6, seed=5).samples
    np.testing.assert_array_equal(a, synthesize(micro, mel, sigma=0.6, seed=5).samples)
    assert not np.array_equal(a, synthesize(micro, mel, sigma=0.6, seed=6).samples)


def test_forward_recovers_latent(micro):
    mel = mel_for(8)
    n = output_length(8, micro.config.group)
    # small sigma keeps the untrained model's output inside [-1, 1], so nothing is clamped
    z = sample_latent(micro, n, 0.2, seed=3)
    audio = synthesize(micro, mel, sigma=0.2, seed=3).samples
    assert np.max(np.abs(audio)) < 1.0
    with T.no_grad():
        back = model_forward(micro, audio[None], mel).z.data
    assert np.max(np.abs(back - z)) < 1e-4


def test_latent_statistics(micro):
    z = sample_latent(micro, 40000, 0.6, seed=0)
    assert z.shape == (1, 4, 10000)
    assert z.std() == pytest.approx(0.6, rel=0.02)
    with pytest.raises(ValueError):
        sample_latent(micro, 8, -1.0)


def test_clipping_warning():
    m = randomize(WaveGlow(preset("micro"), seed=0), seed=1)
    with pytest.warns(UserWarning, match="clipped"):
        clip = synthesize(m, mel_for(4), sigma=50.0)
    assert np.max(np.abs(clip.samples)) <= 1.0


def test_geometry_errors(micro):
    with pytest.raises(ShapeError):
        synthesize(micro, np.zeros((40, 4)))
    with pytest.raises(CoverageError, match="frames"):
        synthesize(micro, mel_for(2), n_samples=4000)


def test_bench_report_consistency(micro, tmp_path):
    rep = benchmark(micro, mel_for(20), repetitions=3)
    assert len(rep.repetitions) == 2
    assert rep.rate_khz == pytest.approx(rep.samples / rep.seconds / 1000, rel=0.01)
    assert rep.realtime_factor == pytest.approx(rep.rate_khz / 22.05)
    assert rep.sampler == GAUSSIAN_SAMPLER
    txt, kv = rep.write(tmp_path)
    assert "kHz" in txt.read_text()
    pairs = dict(line.split("=", 1) for line in kv.read_text().splitlines())
    assert int(pairs["samples"]) == rep.samples
    assert len(pairs["repetitions"].split(",")) == 2
    with pytest.raises(ValueError):
        benchmark(micro, mel_for(4), repetitions=2)


def test_bench_lengths_sorted(micro):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reps = benchmark_lengths(micro, seconds=(0.5, 0.1), repetitions=3)
    assert [r.label for r in reps] == ["0.1s", "0.5s"]
    assert [r.utterances for r in reps] == [5, 1]
    assert reps[0].samples // 5 < reps[1].samples
    for r in reps:
        assert len(r.repetitions) == 2
        assert r.rate_khz == pytest.approx(r.samples / r.seconds / 1000, rel=0.01)
    assert isinstance(reps[0], BenchReport)


def test_bench_mel_shape():
    assert bench_mel(1.0).shape == (80, 22050 // HOP)
