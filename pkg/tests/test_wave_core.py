import numpy as np
import pytest

from src.audio.wave_core import (
    WaveBuffer,
    convolve,
    measure_sir,
    pad_to,
    peak_normalize,
    read_wav,
    rms_db,
    scale_to_sir,
    si_sdr,
    si_sdri,
    write_wav,
)
from src.errors import DataError


def _noise(n=16000, seed=0):
    return WaveBuffer(np.random.default_rng(seed).standard_normal(n) * 0.1)


def test_rms_db_of_constant():
    w = WaveBuffer(np.full(1600, 0.1))
    assert rms_db(w) == pytest.approx(-20.0)


def test_rms_db_floor_on_silence():
    assert rms_db(WaveBuffer.silence(0.5)) == -120.0


def test_rms_db_restricted_to_segments():
    samples = np.zeros(16000)
    samples[:8000] = 0.5
    w = WaveBuffer(samples)
    assert rms_db(w, [(0.0, 0.5)]) == pytest.approx(20 * np.log10(0.5))
    assert rms_db(w) == pytest.approx(10 * np.log10(0.125))


def test_rms_db_empty_raises():
    with pytest.raises(DataError):
        rms_db(WaveBuffer(np.zeros(0)))


def test_si_sdr_is_scale_invariant():
    ref = _noise()
    est = ref.with_samples(ref.samples + 0.01 * _noise(seed=1).samples)
    base = si_sdr(est, ref)
    scaled = si_sdr(est.with_samples(3.0 * est.samples), ref)
    assert scaled == pytest.approx(base, abs=1e-9)


def test_si_sdr_clamped_for_identical_signals():
    ref = _noise()
    assert si_sdr(ref, ref) == 60.0


def test_si_sdr_zero_reference_raises():
    with pytest.raises(DataError):
        si_sdr(_noise(), WaveBuffer(np.zeros(16000)))


def test_si_sdr_length_mismatch_raises():
    with pytest.raises(DataError):
        si_sdr(_noise(100), _noise(200))


def test_si_sdri_of_mixture_is_zero():
    ref = _noise()
    mix = ref.with_samples(ref.samples + _noise(seed=2).samples)
    assert si_sdri(mix, ref, mix) == pytest.approx(0.0)


def test_scale_to_sir_hits_target():
    s = _noise(seed=3)
    n = _noise(seed=4)
    scaled = scale_to_sir(s, n, 4.5)
    assert measure_sir(scaled, n) == pytest.approx(4.5)


def test_scale_to_sir_silent_interference_raises():
    with pytest.raises(DataError):
        scale_to_sir(_noise(), WaveBuffer(np.zeros(16000)), 0.0)


def test_convolve_length_and_delta():
    w = _noise(1000)
    kernel = np.zeros(10)
    kernel[0] = 1.0
    out = convolve(w, kernel)
    assert len(out) == 1009
    np.testing.assert_allclose(out.samples[:1000], w.samples, atol=1e-12)


def test_pad_to_places_at_offset():
    w = WaveBuffer(np.ones(160))
    out = pad_to(w, 0.01, 480)
    assert len(out) == 480
    assert out.samples[159] == 0.0
    assert out.samples[160] == 1.0
    assert out.samples[319] == 1.0
    assert out.samples[320] == 0.0


def test_pad_to_overflow_raises():
    with pytest.raises(DataError):
        pad_to(WaveBuffer(np.ones(400)), 0.01, 480)


def test_peak_normalize():
    w = WaveBuffer(np.array([0.0, 0.5, -2.0]))
    out, gain = peak_normalize(w, 0.9)
    assert out.peak == pytest.approx(0.9)
    assert gain == pytest.approx(0.45)


def test_wav_round_trip(tmp_path):
    w = WaveBuffer(np.sin(np.linspace(0, 200 * np.pi, 16000)) * 0.5)
    path = tmp_path / "a.wav"
    write_wav(path, w)
    back = read_wav(path)
    assert len(back) == len(w)
    assert back.sample_rate_hz == 16000
    np.testing.assert_allclose(back.samples, w.samples, atol=1.0 / 32768 + 1e-9)


def test_write_wav_rejects_clipping(tmp_path):
    with pytest.raises(DataError):
        write_wav(tmp_path / "b.wav", WaveBuffer(np.array([0.0, 1.5])))


def test_read_wav_rejects_other_rates(tmp_path):
    import soundfile as sf

    path = tmp_path / "c.wav"
    sf.write(str(path), np.zeros(800), 8000, subtype="PCM_16")
    with pytest.raises(DataError):
        read_wav(path)


def test_wave_buffer_rejects_stereo():
    with pytest.raises(DataError):
        WaveBuffer(np.zeros((2, 10)))


def test_rms_db_empty_segment_list_is_floor():
    w = WaveBuffer(np.full(1600, 0.1))
    assert rms_db(w, []) == -120.0
    assert rms_db(w, None) == pytest.approx(-20.0)


@pytest.mark.parametrize("gain", [0.1, 0.5, 2.0, 7.0])
def test_rms_db_scales_with_gain(gain):
    w = _noise(seed=5)
    assert rms_db(w.with_samples(gain * w.samples)) == pytest.approx(rms_db(w) + 20 * np.log10(gain), abs=1e-9)
    segments = [(0.1, 0.4), (0.6, 0.9)]
    scaled = rms_db(w.with_samples(-gain * w.samples), segments)
    assert scaled == pytest.approx(rms_db(w, segments) + 20 * np.log10(gain), abs=1e-9)


def test_convolve_is_linear_and_shift_equivariant():
    rng = np.random.default_rng(6)
    a, b = _noise(800, seed=7), _noise(800, seed=8)
    kernel = rng.standard_normal(32) * np.exp(-np.arange(32) / 8.0)
    combined = convolve(a.with_samples(2.0 * a.samples - 0.5 * b.samples), kernel).samples
    expected = 2.0 * convolve(a, kernel).samples - 0.5 * convolve(b, kernel).samples
    np.testing.assert_allclose(combined, expected, atol=1e-10)

    shifted = np.concatenate([np.zeros(5), kernel])
    out = convolve(a, shifted).samples
    np.testing.assert_allclose(out[:5], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[5:], convolve(a, kernel).samples, atol=1e-10)
