import numpy as np
import pytest

from src.audio.pitch import estimate_f0_track, f0_span, mean_f0
from src.audio.wave_core import WaveBuffer
from src.errors import DataError

FS = 16000


def _harmonic(f0, seconds=1.0, harmonics=3):
    t = np.arange(int(seconds * FS)) / FS
    samples = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, harmonics + 1))
    return WaveBuffer(0.3 * samples)


@pytest.mark.parametrize("f0", [110.0, 200.0, 320.0])
def test_mean_f0_of_harmonic_tone(f0):
    track = estimate_f0_track(_harmonic(f0))
    assert mean_f0(track) == pytest.approx(f0, rel=0.02)


def test_constant_tone_has_small_span():
    track = estimate_f0_track(_harmonic(150.0))
    assert f0_span(track) < 5.0


def test_glide_has_wide_span():
    t = np.arange(FS) / FS
    freq = 150.0 + 100.0 * t
    phase = 2 * np.pi * np.cumsum(freq) / FS
    track = estimate_f0_track(WaveBuffer(0.3 * np.sin(phase)))
    assert f0_span(track) > 60.0


def test_silence_is_unvoiced():
    track = estimate_f0_track(WaveBuffer.silence(0.5))
    assert all(not frame.voiced for frame in track)
    assert mean_f0(track) is None
    assert f0_span(track) is None


def test_invalid_range_raises():
    with pytest.raises(DataError):
        estimate_f0_track(_harmonic(200.0), fmin_hz=300.0, fmax_hz=200.0)
    with pytest.raises(DataError):
        estimate_f0_track(_harmonic(200.0), fmin_hz=20.0)


def test_too_short_raises():
    with pytest.raises(DataError):
        estimate_f0_track(WaveBuffer(np.ones(100)))


@pytest.mark.parametrize("f0", [100.0, 150.0, 220.0, 330.0, 400.0])
def test_mean_f0_of_pure_tone_within_one_percent(f0):
    t = np.arange(FS) / FS
    track = estimate_f0_track(WaveBuffer(0.3 * np.sin(2 * np.pi * f0 * t)))
    assert mean_f0(track) == pytest.approx(f0, rel=0.01)


def test_white_noise_is_mostly_unvoiced():
    noise = np.random.default_rng(0).standard_normal(FS) * 0.1
    track = estimate_f0_track(WaveBuffer(noise))
    unvoiced = sum(1 for frame in track if not frame.voiced)
    assert unvoiced >= 0.9 * len(track)
