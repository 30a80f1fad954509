import struct
import wave as wave_mod

import numpy as np
import pytest

from voicemap import dsp


def write_pcm16(path, samples_int16, rate=16000, channels=1):
    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(np.asarray(samples_int16, dtype="<i2").tobytes())


def tone(freq, seconds=1.0, rate=16000, amp=0.5, n=None):
    n = n if n is not None else int(round(seconds * rate))
    return amp * np.cos(2 * np.pi * freq * np.arange(n) / rate)


class TestDecodeWav:
    def test_one_second_mono(self, tmp_path):
        path = tmp_path / "a.wav"
        write_pcm16(path, np.zeros(16000, dtype=np.int16))
        w = dsp.decode_wav(path)
        assert w.samples.size == 16000 and w.sample_rate == 16000

    def test_full_scale_negative_maps_to_minus_one(self, tmp_path):
        path = tmp_path / "a.wav"
        write_pcm16(path, np.array([-32768, 0, 32767], dtype=np.int16))
        w = dsp.decode_wav(path)
        assert w.samples[0] == -1.0
        assert w.samples[1] == 0.0

    def test_stereo_takes_first_channel(self, tmp_path):
        path = tmp_path / "st.wav"
        left = np.arange(100, dtype=np.int16)
        right = -left
        write_pcm16(path, np.stack([left, right], axis=1).ravel(), channels=2)
        w = dsp.decode_wav(path)
        assert w.samples.size == 100
        np.testing.assert_allclose(w.samples, left / 32768.0)

    def test_non_pcm_rejected(self, tmp_path):
        path = tmp_path / "float.wav"
        # minimal IEEE-float (format tag 3) WAVE header
        data = struct.pack("<4f", 0.0, 0.1, -0.1, 0.2)
        fmt = struct.pack("<HHIIHH", 3, 1, 16000, 16000 * 4, 4, 32)
        blob = (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE"
                + b"fmt " + struct.pack("<I", len(fmt)) + fmt
                + b"data" + struct.pack("<I", len(data)) + data)
        path.write_bytes(blob)
        with pytest.raises(dsp.UnsupportedFormatError):
            dsp.decode_wav(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "a.wav"
        write_pcm16(path, np.zeros(1000, dtype=np.int16))
        blob = path.read_bytes()
        path.write_bytes(blob[:-500])
        with pytest.raises((IOError, wave_mod.Error, EOFError)):
            dsp.decode_wav(path)


class TestResample:
    def test_length_formula(self):
        w = dsp.Waveform(np.random.default_rng(0).standard_normal(50000) * 0.1, 50000)
        out = dsp.resample(w, 16000)
        assert out.samples.size == 16000 and out.sample_rate == 16000

    def test_identity_when_rates_equal(self):
        x = np.random.default_rng(1).standard_normal(777) * 0.1
        out = dsp.resample(dsp.Waveform(x, 16000), 16000)
        np.testing.assert_array_equal(out.samples, x)

    def test_tone_survives_downsampling(self):
        # oracle: dominant DFT bin of the output stays at 1 kHz within one bin
        rate = 50000
        x = tone(1000, seconds=1.0, rate=rate)
        out = dsp.resample(dsp.Waveform(x, rate), 16000)
        spectrum = np.abs(np.fft.rfft(out.samples))
        peak_hz = spectrum.argmax() * 16000 / out.samples.size
        assert abs(peak_hz - 1000) <= 16000 / out.samples.size

    def test_round_trip_keeps_peak_bin(self):
        x = tone(1000, seconds=1.0, rate=16000)
        up = dsp.resample(dsp.Waveform(x, 16000), 48000)
        back = dsp.resample(up, 16000)
        ref_bin = np.abs(np.fft.rfft(x)).argmax()
        assert np.abs(np.fft.rfft(back.samples)).argmax() == ref_bin

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            dsp.resample(dsp.Waveform(np.ones(10), 16000), 0)


class TestLogMel:
    @pytest.mark.parametrize("seconds,frames", [(0.37, 37), (1.0, 100), (2.5, 250)])
    def test_frame_count_law(self, seconds, frames):
        n = int(round(seconds * 16000))
        x = np.random.default_rng(2).standard_normal(n) * 0.1
        spec = dsp.log_mel_spectrogram(dsp.Waveform(x, 16000))
        assert spec.values.shape == (128, frames)
        assert spec.original_frames == spec.padded_frames == frames

    def test_silence_is_log_floor(self):
        spec = dsp.log_mel_spectrogram(dsp.Waveform(np.zeros(16000), 16000))
        np.testing.assert_allclose(spec.values, np.log(1e-10))

    def test_tone_peaks_in_nearest_mel_bin(self):
        centers = dsp.mel_filter_centers()
        nearest = int(np.argmin(np.abs(centers - 1000.0)))
        spec = dsp.log_mel_spectrogram(dsp.Waveform(tone(1000), 16000))
        assert (spec.values.argmax(axis=0) == nearest).all()

    def test_sine_interior_frames_peak_in_nearest_bin(self):
        centers = dsp.mel_filter_centers()
        nearest = int(np.argmin(np.abs(centers - 1000.0)))
        x = 0.5 * np.sin(2 * np.pi * 1000 * np.arange(16000) / 16000)
        spec = dsp.log_mel_spectrogram(dsp.Waveform(x, 16000))
        assert (spec.values.argmax(axis=0)[1:-1] == nearest).all()

    def test_mel_energy_bounded_by_frame_power(self):
        # filters have unit peak and adjacent filters sum to at most 1 per bin
        x = np.random.default_rng(3).standard_normal(8000) * 0.3
        spec = dsp.log_mel_spectrogram(dsp.Waveform(x, 16000))
        padded = np.pad(x, 200, mode="reflect")
        idx = np.arange(spec.values.shape[1])[:, None] * 160 + np.arange(400)[None, :]
        frames = padded[idx] * np.hamming(400)
        total_power = (np.abs(np.fft.rfft(frames, n=512, axis=1)) ** 2).sum(axis=1)
        mel_total = np.exp(spec.values).sum(axis=0)
        assert (mel_total <= total_power + 1e-9).all()

    def test_scale_monotone(self):
        x = np.random.default_rng(4).standard_normal(4800) * 0.2
        a = dsp.log_mel_spectrogram(dsp.Waveform(x, 16000)).values
        b = dsp.log_mel_spectrogram(dsp.Waveform(2.0 * x, 16000)).values
        assert (b >= a - 1e-12).all()

    def test_rejects_wrong_rate_and_too_short(self):
        with pytest.raises(ValueError):
            dsp.log_mel_spectrogram(dsp.Waveform(np.ones(8000), 8000))
        with pytest.raises(ValueError):
            dsp.log_mel_spectrogram(dsp.Waveform(np.ones(100), 16000))


class TestPadTruncate:
    def make(self, frames):
        vals = np.random.default_rng(5).standard_normal((128, frames))
        return dsp.Spectrogram(vals, original_frames=frames, padded_frames=frames)

    def test_pad(self):
        out = dsp.pad_or_truncate(self.make(100), 2.0, fill=-1.5)
        assert out.values.shape[1] == 200
        assert out.original_frames == 100
        assert (out.values[:, 100:] == -1.5).all()

    def test_truncate_clamps_original(self):
        out = dsp.pad_or_truncate(self.make(250), 2.0)
        assert out.values.shape[1] == 200
        assert out.original_frames == 200

    def test_exact_size_unchanged(self):
        spec = self.make(200)
        out = dsp.pad_or_truncate(spec, 2.0)
        np.testing.assert_array_equal(out.values, spec.values)
        assert out.original_frames == 200


class TestNormalize:
    def test_constant_to_zero(self):
        spec = dsp.Spectrogram(np.full((128, 10), 4.2), 10, 10)
        out = dsp.normalize_spectrogram(spec, dsp.FeatureStats(mean=4.2, std=1.0))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_round_trip(self):
        vals = np.random.default_rng(6).standard_normal((128, 20))
        spec = dsp.Spectrogram(vals, 20, 20)
        stats = dsp.FeatureStats(mean=0.3, std=2.5)
        back = dsp.denormalize_spectrogram(dsp.normalize_spectrogram(spec, stats), stats)
        np.testing.assert_allclose(back.values, vals, atol=1e-9)

    def test_zero_std_rejected(self):
        spec = dsp.Spectrogram(np.zeros((128, 5)), 5, 5)
        with pytest.raises(ValueError):
            dsp.normalize_spectrogram(spec, dsp.FeatureStats(mean=0.0, std=0.0))

    def test_stats_from_training_split_only(self):
        train = [dsp.Spectrogram(np.full((2, 4), 1.0), 2, 4)]
        stats = dsp.compute_stats(train)
        # only the unpadded region contributes
        assert stats.mean == 1.0 and stats.std == 0.0


class TestCache:
    def test_round_trip(self, tmp_path):
        vals = np.random.default_rng(7).standard_normal((128, 30)).astype("<f4")
        spec = dsp.Spectrogram(vals.astype(np.float64), 25, 30)
        path = tmp_path / "s.fbnk"
        dsp.save_spectrogram(spec, path)
        back = dsp.load_spectrogram(path)
        np.testing.assert_array_equal(back.values, spec.values)
        assert back.original_frames == 25 and back.padded_frames == 30

    def test_write_is_deterministic(self, tmp_path):
        spec = dsp.Spectrogram(np.ones((4, 4)), 4, 4)
        dsp.save_spectrogram(spec, tmp_path / "a")
        dsp.save_spectrogram(spec, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ValueError):
            dsp.load_spectrogram(tmp_path / "junk")
