
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_sv.errors import ConfigError, DataError, FormatError
from adaptive_sv.features import (
    AudioSignal,
    FeatureConfig,
    featurize,
    frame_signal,
    log_mel_filterbank,
    mel_center_frequencies,
    mel_filterbank,
    power_spectrum,
    read_wav,
    write_wav,
)

CFG = FeatureConfig()


def noise(n, seed=0, sr=16000):
    return AudioSignal(np.random.default_rng(seed).uniform(-0.5, 0.5, n), sr)


class TestFraming:
    @pytest.mark.parametrize("n, expected", [(16000, 98), (400, 1), (32000, 198), (559, 1), (560, 2)])
    def test_frame_count(self, n, expected):
        assert frame_signal(noise(n), CFG).shape == (expected, 400)

    def test_too_short(self):
        with pytest.raises(DataError, match="utterance too short.*400.*399"):
            frame_signal(noise(399), CFG)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=400, max_value=20000))
    def test_frame_count_formula(self, n):
        assert frame_signal(noise(n), CFG).shape[0] == 1 + (n - 400) // 160

    def test_input_unmodified(self):
        sig = noise(1000)
        before = sig.samples.copy()
        frame_signal(sig, CFG)
        np.testing.assert_array_equal(sig.samples, before)

    def test_preemphasis_and_window(self):
        sig = noise(400, seed=3)
        x = sig.samples
        expected = np.empty(400)
        expected[0] = x[0] - 0.97 * x[0]
        expected[1:] = x[1:] - 0.97 * x[:-1]
        np.testing.assert_allclose(frame_signal(sig, CFG)[0], expected * np.hamming(400), rtol=1e-12)

    def test_rate_mismatch(self):
        with pytest.raises(ConfigError):
            frame_signal(noise(8000, sr=8000), CFG)


class TestConfig:
    def test_defaults(self):
        assert (CFG.frame_len_samples, CFG.frame_shift_samples, CFG.n_fft) == (400, 160, 512)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_mels=0), dict(low_freq=0.0), dict(high_freq=9000.0), dict(low_freq=500, high_freq=400), dict(fft_size=256), dict(fft_size=500)],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            FeatureConfig(**kwargs)


class TestFilterbank:
    def test_zero_frame(self):
        out = log_mel_filterbank(np.zeros(400), CFG)
        np.testing.assert_array_equal(out, np.full(80, np.log(1e-10)))

    # band 0 is centred at 42 Hz, inside the Hamming main lobe around DC at a
    # 31.25 Hz bin spacing, so it cannot be separated from band 1
    @pytest.mark.parametrize("k", [k for k, f in enumerate(mel_center_frequencies(CFG)) if f >= 2 * 16000 / 512])
    def test_tone_at_band_center(self, k):
        f = mel_center_frequencies(CFG)[k]
        frame = np.hamming(400) * np.sin(2 * np.pi * f * np.arange(400) / 16000)
        assert np.argmax(log_mel_filterbank(frame, CFG)) == k

    def test_filters_bounded_by_unity(self):
        assert mel_filterbank(CFG).sum(axis=0).max() <= 1.0 + 1e-12

    def test_white_noise_energy_bound(self):
        frame = np.random.default_rng(7).standard_normal(400)
        linear = np.exp(log_mel_filterbank(frame, CFG)) - CFG.energy_floor
        total = power_spectrum(frame, 512).sum()
        assert linear.sum() <= total

    def test_parseval(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            frame = rng.standard_normal(400)
            half = power_spectrum(frame, 512)
            full = half.sum() + half[1:-1].sum()  # mirror the negative frequencies
            np.testing.assert_allclose(np.sum(frame**2), full / 512, rtol=1e-6)


class TestFeaturize:
    def test_two_seconds(self):
        assert featurize(noise(32000), CFG).frames.shape == (198, 80)

    def test_single_frame(self):
        assert featurize(noise(400), CFG).frames.shape == (1, 80)

    def test_deterministic(self):
        a = featurize(noise(8000, seed=5), CFG)
        b = featurize(noise(8000, seed=5), CFG)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.config_hash == b.config_hash

    def test_dither_is_seeded(self):
        cfg = FeatureConfig(dither=1e-3)
        a = featurize(noise(4000), cfg, rng=11).frames
        b = featurize(noise(4000), cfg, rng=11).frames
        assert np.array_equal(a, b)
        assert not np.array_equal(a, featurize(noise(4000), CFG).frames)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=0.05, max_value=20.0), st.integers(0, 1000))
    def test_scaling_shifts_log_energy(self, c, seed):
        sig = noise(2000, seed=seed)
        base = featurize(sig, CFG).frames
        scaled = featurize(AudioSignal(sig.samples * c, 16000), CFG).frames
        above = np.exp(np.minimum(base, scaled)) > 1e6 * CFG.energy_floor
        shift = scaled[above] - base[above]
        assert np.all(np.abs(shift - 2 * np.log(c)) <= 1e-6 * np.maximum(1.0, np.abs(base[above])))

    def test_all_finite(self):
        sig = AudioSignal(np.zeros(3000), 16000)
        assert np.all(np.isfinite(featurize(sig, CFG).frames))


class TestWav:
    def test_roundtrip(self, tmp_path):
        pcm = np.array([0, 1, -1, 32767, -32768, 1234], dtype="<i2")
        sig = AudioSignal(pcm / 32768.0, 16000)
        write_wav(tmp_path / "a.wav", sig)
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(back.samples, pcm / 32768.0)

    def _header(self, fmt_tag, channels, bits):
        import struct

        data = b"\x00" * 8
        block = channels * bits // 8
        fmt = struct.pack("<HHIIHH", fmt_tag, channels, 16000, 16000 * block, block, bits)
        body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(data)) + data
        return b"RIFF" + struct.pack("<I", len(body)) + body

    def test_accepts_pcm16_bytes(self):
        assert read_wav(self._header(1, 1, 16)).samples.size == 4

    @pytest.mark.parametrize(
        "tag, channels, bits, msg",
        [(3, 1, 32, "PCM 16-bit mono"), (1, 2, 16, "2 channels"), (1, 1, 8, "8-bit")],
    )
    def test_rejects(self, tag, channels, bits, msg):
        with pytest.raises(FormatError, match=msg):
            read_wav(self._header(tag, channels, bits))

    def test_rejects_garbage(self):
        with pytest.raises(FormatError):
            read_wav(b"not a wav file at all")
