import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveglow.errors import DomainError, FormatError, ShapeError
from waveglow.signal import (HOP, LOG_FLOOR, N_FFT, SAMPLE_RATE, AudioClip, griffin_lim, hann_window,
                             hz_to_mel, istft, load_mel, load_wav, mel_centers, mel_filterbank,
                             mel_spectrogram, mel_to_hz, n_frames, save_mel, save_wav, spectral_distance,
                             stft)


def tone(freq, n, amp=0.5, phase=0.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SAMPLE_RATE + phase)


def brute_stft(x):
    # direct DFT of each reflect-padded, windowed frame
    xp = np.pad(x, N_FFT // 2, mode="reflect")
    w = hann_window()
    k = np.arange(N_FFT // 2 + 1)[:, None]
    n = np.arange(N_FFT)[None, :]
    basis = np.exp(-2j * np.pi * k * n / N_FFT)
    frames = [xp[f * HOP:f * HOP + N_FFT] * w for f in range(1 + (len(xp) - N_FFT) // HOP)]
    return np.stack([basis @ fr for fr in frames], axis=1)


def write_raw_wav(path, data: bytes, channels=1, width=2, rate=SAMPLE_RATE):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(data)


# WAV


def test_wav_round_trip_extremes(tmp_path):
    clip = AudioClip(np.array([-32768, 0, 32767]) / 32768.0)
    save_wav(tmp_path / "a.wav", clip)
    back = load_wav(tmp_path / "a.wav")
    np.testing.assert_array_equal(back.samples, clip.samples)
    assert back.sample_rate == SAMPLE_RATE


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=200))
def test_wav_round_trip_preserves_integers(tmp_path_factory, ints):
    path = tmp_path_factory.mktemp("wav") / "x.wav"
    clip = AudioClip(np.array(ints) / 32768.0)
    save_wav(path, clip)
    np.testing.assert_array_equal(np.round(load_wav(path).samples * 32768).astype(int), ints)


def test_wav_rejects_stereo(tmp_path):
    write_raw_wav(tmp_path / "s.wav", b"\x00\x00" * 8, channels=2)
    with pytest.raises(FormatError, match="channels=2, expected mono"):
        load_wav(tmp_path / "s.wav")


def test_wav_rejects_other_rate(tmp_path):
    write_raw_wav(tmp_path / "r.wav", b"\x00\x00" * 8, rate=44100)
    with pytest.raises(FormatError, match="sample_rate=44100"):
        load_wav(tmp_path / "r.wav")


def test_wav_rejects_8_bit_and_garbage(tmp_path):
    write_raw_wav(tmp_path / "b.wav", b"\x80" * 8, width=1)
    with pytest.raises(FormatError, match="sample_width"):
        load_wav(tmp_path / "b.wav")
    (tmp_path / "g.wav").write_bytes(b"RIFF\x00\x00junk")
    with pytest.raises(FormatError, match="malformed"):
        load_wav(tmp_path / "g.wav")


def test_audio_clip_range():
    AudioClip(np.array([1.0 + 5e-7, -1.0]))
    with pytest.raises(DomainError):
        AudioClip(np.array([1.01]))
    with pytest.raises(DomainError):
        AudioClip(np.zeros(3), sample_rate=0)


# STFT


def test_frame_count_formula():
    for n in (1, 255, 256, 1000, 22050):
        padded = n + N_FFT
        assert stft(np.zeros(n)).shape == (513, 1 + (padded - N_FFT) // HOP) == (513, n_frames(n))


def test_stft_zero():
    assert not np.any(stft(np.zeros(3000)))


def test_stft_dc_bin0_is_window_sum():
    spec = stft(np.ones(8192))
    interior = spec[:, 4:-4]
    np.testing.assert_allclose(np.abs(interior[0]), 512.0, atol=1e-9)
    assert hann_window().sum() == pytest.approx(512.0)
    assert np.all(np.abs(interior[2:]) < 1e-9)


def test_stft_matches_brute_force_dft():
    x = np.random.default_rng(0).uniform(-1, 1, 3000)
    np.testing.assert_allclose(stft(x), brute_stft(x), atol=1e-9)


@pytest.mark.parametrize("k", [5, 20, 93, 300])
def test_stft_bin_aligned_tone_peaks_at_k(k):
    spec = np.abs(stft(tone(SAMPLE_RATE * k / N_FFT, 8192)))
    assert np.all(np.argmax(spec[:, 4:-4], axis=0) == k)
    assert np.all(np.argmax(np.abs(brute_stft(tone(SAMPLE_RATE * k / N_FFT, 8192)))[:, 4:-4], axis=0) == k)


def test_stft_parseval_on_interior_frames():
    x = np.random.default_rng(1).uniform(-1, 1, 20000)
    spec = stft(x)
    frames = range(4, spec.shape[1] - 4)
    one_sided = np.abs(spec[:, list(frames)]) ** 2
    one_sided[1:-1] *= 2  # conjugate-symmetric bins counted twice
    spectral = one_sided.sum() / N_FFT
    # time energy weighted by the squared window of each interior frame
    w2 = hann_window() ** 2
    weight = np.zeros(x.size)
    for f in frames:
        start = f * HOP - N_FFT // 2
        weight[start:start + N_FFT] += w2
    time_energy = np.sum(weight * x * x)
    assert abs(spectral - time_energy) / time_energy < 0.01


@pytest.mark.parametrize("n", [1000, 4097, 22050])
def test_istft_inverts_stft(n):
    x = np.random.default_rng(n).uniform(-1, 1, n)
    np.testing.assert_allclose(istft(stft(x), n), x, atol=1e-4)


# mel


def test_hz_to_mel_values():
    assert hz_to_mel(0.0) == 0.0
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2.0))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    f = np.array([10.0, 440.0, 8000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f)


def test_filterbank_rows():
    fb = mel_filterbank()
    assert fb.shape == (80, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        seg = row[nz[0]:nz[-1] + 1]
        peak = int(np.argmax(seg))
        assert np.all(np.diff(seg[:peak + 1]) >= 0) and np.all(np.diff(seg[peak:]) <= 0)
    assert np.all(np.diff(mel_centers()) > 0)
    assert np.all(np.diff(hz_to_mel(mel_centers())) > 0)


def test_filterbank_supports_nested_in_order():
    fb = mel_filterbank()
    first = np.array([np.flatnonzero(r)[0] for r in fb])
    last = np.array([np.flatnonzero(r)[-1] for r in fb])
    assert np.all(np.diff(first) >= 0) and np.all(np.diff(last) >= 0)
    assert np.all(first <= last)


def test_filterbank_area_and_sum_normalisation():
    df = SAMPLE_RATE / N_FFT
    area = mel_filterbank(norm="area")
    # wide (high) filters integrate to one over frequency
    np.testing.assert_allclose(area[40:].sum(axis=1) * df, 1.0, rtol=0.02)
    np.testing.assert_allclose(mel_filterbank(norm="sum").sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        mel_filterbank(norm="peak")


def test_mel_zero_audio_is_floor():
    mel = mel_spectrogram(np.zeros(5000))
    assert mel.shape == (80, n_frames(5000))
    np.testing.assert_allclose(mel, np.log(LOG_FLOOR))
    assert np.log(LOG_FLOOR) == pytest.approx(-11.5129, abs=1e-4)


def test_mel_1khz_argmax_is_nearest_center():
    mel = mel_spectrogram(tone(1000.0, 22050))
    expect = int(np.argmin(np.abs(mel_centers() - 1000.0)))
    assert np.all(np.argmax(mel[:, 4:-4], axis=0) == expect)


def test_mel_doubling_amplitude_adds_log2():
    x = tone(440.0, 8000, amp=0.2) + tone(3000.0, 8000, amp=0.1)
    a, b = mel_spectrogram(x), mel_spectrogram(2 * x)
    above = a > np.log(LOG_FLOOR) + 1e-9
    np.testing.assert_allclose(b[above] - a[above], np.log(2.0), atol=1e-9)


def test_mel_shift_covariance():
    x = np.random.default_rng(3).uniform(-0.5, 0.5, 12000)
    a = mel_spectrogram(x)
    b = mel_spectrogram(x[HOP:])
    np.testing.assert_allclose(b[:, 4:-4], a[:, 5:-4], atol=1e-4)


def test_mel_container_round_trip(tmp_path):
    mel = np.random.default_rng(0).normal(size=(80, 13))
    save_mel(tmp_path / "m.mel", mel)
    np.testing.assert_allclose(load_mel(tmp_path / "m.mel"), mel.astype(np.float32))
    raw = (tmp_path / "m.mel").read_bytes()
    assert raw[:8] == b"WGMEL\x00\x00\x00"
    assert int.from_bytes(raw[16:24], "little") == 80
    assert int.from_bytes(raw[24:32], "little") == 13
    assert len(raw) == 32 + 4 * 80 * 13


def test_mel_container_errors(tmp_path):
    (tmp_path / "bad.mel").write_bytes(b"NOPE" * 10)
    with pytest.raises(FormatError, match="magic"):
        load_mel(tmp_path / "bad.mel")
    save_mel(tmp_path / "t.mel", np.zeros((2, 3)))
    (tmp_path / "t.mel").write_bytes((tmp_path / "t.mel").read_bytes()[:-4])
    with pytest.raises(FormatError, match="bytes"):
        load_mel(tmp_path / "t.mel")
    with pytest.raises(ShapeError):
        save_mel(tmp_path / "x.mel", np.zeros(3))


# Griffin-Lim


def test_griffin_lim_zero_magnitude_is_silent():
    y = griffin_lim(np.zeros((513, 10)), iterations=5)
    assert not np.any(y.samples)


def test_griffin_lim_zero_iterations_is_zero_phase_inverse():
    m = np.abs(stft(tone(700.0, 4096)))
    y = griffin_lim(m, iterations=0, length=4096).samples
    ref = istft(m.astype(complex), 4096)
    np.testing.assert_allclose(y, ref * 0.99 / np.max(np.abs(ref)), atol=1e-12)


def test_griffin_lim_rejects_negative():
    with pytest.raises(DomainError):
        griffin_lim(-np.ones((513, 3)))


def test_griffin_lim_distance_non_increasing():
    x = tone(SAMPLE_RATE * 20 / N_FFT, 22050)
    m = np.abs(stft(x))
    dists = []
    griffin_lim(m, iterations=60, length=x.size, callback=lambda i, y: dists.append(spectral_distance(y, m)))
    assert len(dists) == 61
    assert np.all(np.diff(dists) <= 1e-6)
    assert dists[-1] < dists[0]


def test_griffin_lim_output_peak():
    m = np.abs(stft(tone(500.0, 6000)))
    y = griffin_lim(m, iterations=3, length=6000)
    assert np.max(np.abs(y.samples)) == pytest.approx(0.99)
