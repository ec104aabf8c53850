import math

import numpy as np
import pytest
from scipy.io import wavfile

from vadfusion.prosody import (
    ProsodyConfig,
    Waveform,
    extract_energy,
    extract_pitch,
    extract_prosody,
    frame_count,
    load_wav,
    save_wav,
)

FS = 16000


def sine(freq, seconds=1.0, amp=0.5, fs=FS):
    t = np.arange(int(seconds * fs)) / fs
    return Waveform(amp * np.sin(2 * np.pi * freq * t), fs)


class TestWaveform:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Waveform(np.array([]), FS)

    def test_rejects_low_rate(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(100), 4000)


class TestEnergy:
    def test_silence_hits_floor(self):
        w = Waveform(np.zeros(FS), FS)
        e = extract_energy(w, 25.0, 20.0)
        assert np.allclose(e, math.log(1e-10))

    def test_unit_square_wave(self):
        x = np.ones(FS)
        x[::2] = -1.0
        e = extract_energy(Waveform(x, FS), 25.0, 20.0)
        assert np.allclose(e, math.log(1.0 + 1e-10), atol=1e-12)

    def test_frame_count_formula(self):
        w = Waveform(np.zeros(16000), FS)
        e = extract_energy(w, 25.0, 20.0)
        assert len(e) == 1 + (16000 - 400) // 320 == 49

    def test_too_short_waveform(self):
        with pytest.raises(ValueError, match="shorter"):
            extract_energy(Waveform(np.zeros(100), FS), 25.0, 20.0)

    def test_bad_framing(self):
        with pytest.raises(ValueError, match="frame_ms"):
            extract_energy(Waveform(np.zeros(FS), FS), 10.0, 20.0)

    def test_scale_shift_property(self):
        # log-energy of c*w = log-energy of w + 2 log c (away from the floor)
        rng = np.random.default_rng(0)
        x = 0.2 * rng.standard_normal(FS)
        e1 = extract_energy(Waveform(x, FS))
        e2 = extract_energy(Waveform(2.0 * x, FS))
        assert np.allclose(e2, e1 + 2.0 * math.log(2.0), atol=1e-6)


class TestPitch:
    def test_pure_sine_220(self):
        p = extract_pitch(sine(220.0), 25.0, 20.0, 80.0, 400.0)
        voiced = p[p > 0]
        assert len(voiced) == len(p)
        assert np.all(np.abs(voiced - 220.0) <= 3.0)

    def test_white_noise_mostly_unvoiced(self):
        rng = np.random.default_rng(123)
        w = Waveform(0.3 * rng.standard_normal(FS), FS)
        p = extract_pitch(w, 25.0, 20.0, 80.0, 400.0)
        assert np.mean(p == 0.0) >= 0.90

    def test_silence_all_unvoiced(self):
        p = extract_pitch(Waveform(np.zeros(FS), FS), 25.0, 20.0, 80.0, 400.0)
        assert np.all(p == 0.0)

    def test_amplitude_invariance(self):
        w = sine(180.0)
        p1 = extract_pitch(w, 25.0, 20.0, 80.0, 400.0)
        p2 = extract_pitch(Waveform(0.1 * w.samples, FS), 25.0, 20.0, 80.0, 400.0)
        assert np.allclose(p1, p2)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError, match="f_min"):
            extract_pitch(sine(220.0), 25.0, 20.0, 400.0, 80.0)
        with pytest.raises(ValueError, match="f_min"):
            extract_pitch(sine(220.0), 25.0, 20.0, 100.0, 9000.0)

    def test_frame_too_short_for_two_periods(self):
        with pytest.raises(ValueError, match="two periods"):
            extract_pitch(sine(220.0), 25.0, 20.0, 40.0, 400.0)


class TestExtractProsody:
    def test_alignment_to_target(self):
        w = sine(220.0, seconds=1.0)
        pf = extract_prosody(w, n_frames=49)
        assert pf.frames.shape == (49, 2)
        padded = extract_prosody(w, n_frames=60)
        assert padded.frames.shape == (60, 2)
        assert np.all(padded.frames[49:] == 0.0)

    def test_constant_pitch_becomes_zero_channel(self):
        # constant- f0 sine: pitch channel constant -> all-zero after z-norm
        pf = extract_prosody(sine(220.0))
        pitch_chan = pf.frames[:, 0]
        assert np.allclose(pitch_chan, 0.0, atol=1e-6)

    def test_znorm_stats(self):
        rng = np.random.default_rng(1)
        # noisy modulated tone: both channels vary
        t = np.arange(FS) / FS
        x = (0.2 + 0.3 * t) * np.sin(2 * np.pi * (150 + 100 * t) * t)
        x = x + 0.01 * rng.standard_normal(FS)
        pf = extract_prosody(Waveform(x, FS))
        assert np.allclose(pf.frames.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(pf.frames.std(axis=0), 1.0, atol=1e-9)

    def test_ramped_sine_energy_monotone(self):
        t = np.arange(FS) / FS
        x = t * np.sin(2 * np.pi * 220.0 * t)          # amplitude 0 -> 1
        e = extract_energy(Waveform(x, FS))
        assert np.all(np.diff(e) > 0.0)


class TestWavIO:
    def test_roundtrip_int16(self, tmp_path):
        w = sine(220.0)
        path = tmp_path / "tone.wav"
        save_wav(path, w)
        back = load_wav(path)
        assert back.sample_rate_hz == FS
        assert np.max(np.abs(back.samples - w.samples)) < 1e-3

    def test_float32_supported(self, tmp_path):
        path = tmp_path / "f32.wav"
        wavfile.write(path, FS, sine(100.0).samples.astype(np.float32))
        back = load_wav(path)
        assert back.samples.dtype == np.float64
        assert len(back) == FS

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        stereo = np.zeros((1000, 2), dtype=np.int16)
        wavfile.write(path, FS, stereo)
        with pytest.raises(ValueError, match="mono"):
            load_wav(path)


def test_frame_count_helper():
    assert frame_count(16000, 400, 320) == 49
    assert frame_count(400, 400, 320) == 1
