import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from diffuse_se.audio import (AudioBuffer, AudioFormatError, CorpusSpec, Manifest,
                              ManifestRecord, frame_signal, hann, mel_filterbank,
                              mel_spectrogram, mix_at_snr, n_frames_for, read_wav, snr_db,
                              stft_log_magnitude, stft_magnitude, synth_corpus, synth_speech,
                              write_wav)

SR = 16000


def sine(freq=1000.0, n=SR, amp=1.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 4000)
    write_wav(tmp_path / "a.wav", AudioBuffer(x))
    y = read_wav(tmp_path / "a.wav")
    assert y.sample_rate == SR
    assert np.max(np.abs(y.samples - x)) <= 1 / 32768


def test_wav_zero_exact(tmp_path):
    write_wav(tmp_path / "z.wav", AudioBuffer(np.zeros(100)))
    assert np.array_equal(read_wav(tmp_path / "z.wav").samples, np.zeros(100))


def test_full_scale_sine(tmp_path):
    x = sine()
    write_wav(tmp_path / "s.wav", AudioBuffer(x))
    # +1.0 saturates to 32767/32768, i.e. exactly one LSB low
    assert np.max(np.abs(read_wav(tmp_path / "s.wav").samples - x)) <= 1 / 32768


def _raw_wav(path, channels=1, width=2, rate=SR):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\x00" * (channels * width * 10))


@pytest.mark.parametrize("kw,msg", [({"channels": 2}, "mono"), ({"width": 1}, "16-bit"),
                                    ({"rate": 22050}, "16000")])
def test_wav_rejects_unsupported(tmp_path, kw, msg):
    _raw_wav(tmp_path / "x.wav", **kw)
    with pytest.raises(AudioFormatError, match=msg):
        read_wav(tmp_path / "x.wav")


def test_wav_rejects_garbage(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"RIFFnonsense")
    with pytest.raises(AudioFormatError):
        read_wav(tmp_path / "g.wav")


@given(st.integers(1024, 20000))
@settings(max_examples=30, deadline=None)
def test_frame_count(L):
    assert frame_signal(np.zeros(L)).shape == (n_frames_for(L), 1024)
    assert n_frames_for(L) == math.ceil(L / 256)


def test_frames_are_centred_on_hop_blocks():
    x = np.arange(4096, dtype=float)
    fr = frame_signal(x)
    # frame f centred on f*256 + 128
    assert fr[3][512] == 3 * 256 + 128


def test_sine_peak_bin():
    c = stft_log_magnitude(AudioBuffer(sine()))
    assert c.frames.shape == (63, 513)
    # frames whose window lies wholly inside the signal; the two edge frames
    # see the reflected padding
    interior = c.frames[2:-2]
    assert np.all(np.argmax(interior, axis=1) == round(1000 * 1024 / 16000))


def test_zero_signal_features():
    z = AudioBuffer(np.zeros(3000))
    assert np.all(stft_log_magnitude(z).frames == np.log(1e-5))
    m = mel_spectrogram(z)
    assert m.frames.shape == (12, 80)
    assert np.all(m.frames == np.log(1e-5))


def test_parseval():
    x = np.random.default_rng(1).standard_normal(8000)
    mag = stft_magnitude(x)
    frames = frame_signal(x) * hann()
    w = np.full(513, 2.0)
    w[[0, -1]] = 1.0
    spec_energy = (mag ** 2 * w).sum(axis=1) / 1024
    assert spec_energy == pytest.approx((frames ** 2).sum(axis=1), rel=1e-6)


def test_too_short():
    with pytest.raises(AudioFormatError):
        stft_log_magnitude(AudioBuffer(np.zeros(1000)))


def test_mel_filterbank_shape_properties():
    fb = mel_filterbank()
    assert fb.shape == (80, 513)
    assert np.all(fb.sum(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        assert np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))
    peaks = np.argmax(fb, axis=1)
    assert np.all(np.diff(peaks) >= 0)
    assert np.all(np.diff([np.flatnonzero(r)[0] for r in fb]) >= 0)


def test_white_noise_mel_tracks_band_energy():
    x = np.random.default_rng(2).standard_normal(10 * SR) * 0.1
    mel = np.exp(mel_spectrogram(AudioBuffer(x)).frames).mean(axis=0)
    band = mel_filterbank().sum(axis=1)
    assert stats.spearmanr(mel, band).statistic > 0.98


def test_mix_at_snr_definition():
    rng = np.random.default_rng(3)
    c = AudioBuffer(sine(200, 8000, 0.3))
    n = AudioBuffer(rng.standard_normal(12000) * 0.1)
    m0 = mix_at_snr(c, n, 0.0, rng)
    assert np.linalg.norm(m0.clean.samples) == pytest.approx(np.linalg.norm(m0.noise.samples), rel=1e-9)
    for snr in (-5.0, 2.5, 17.5):
        m = mix_at_snr(c, n, snr, rng)
        assert abs(snr_db(m.clean, m.noise) - snr) < 1e-6
        assert np.allclose(m.noisy.samples, m.clean.samples + m.noise.samples)


def test_mix_high_snr_residual():
    rng = np.random.default_rng(4)
    c = AudioBuffer(sine(300, 8000, 0.5))
    m = mix_at_snr(c, AudioBuffer(rng.standard_normal(8000)), 60.0, rng)
    resid = m.noisy.samples - c.samples
    assert 10 * math.log10(np.sum(resid ** 2) / np.sum(c.samples ** 2)) == pytest.approx(-60, abs=1e-6)


def test_mix_tiles_short_noise_and_normalises_peak():
    rng = np.random.default_rng(5)
    c = AudioBuffer(sine(250, 8000, 0.95))
    m = mix_at_snr(c, AudioBuffer(rng.standard_normal(500)), 0.0, rng)
    assert len(m.noisy) == 8000
    assert m.gain < 1
    assert np.max(np.abs(m.noisy.samples)) <= 1.0
    assert abs(snr_db(m.clean, m.noise)) < 1e-6
    assert np.allclose(m.clean.samples, c.samples * m.gain)


def test_mix_rejects_bad_input():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        mix_at_snr(AudioBuffer(np.zeros(100)), AudioBuffer(np.ones(100)), 5.0, rng)
    with pytest.raises(ValueError):
        mix_at_snr(AudioBuffer(np.ones(100)), AudioBuffer(np.ones(100)), float("inf"), rng)


def test_synth_corpus(tmp_path):
    spec = CorpusSpec(n_train=6, n_valid=2, n_test=2, duration=2.0, snrs=(0, 5, 10, 15))
    m = synth_corpus(spec, tmp_path, np.random.default_rng(7))
    assert len(m) == 10
    assert len(list((tmp_path / "clean").glob("*.wav"))) == 10
    assert len(list((tmp_path / "noisy").glob("*.wav"))) == 10
    loaded = Manifest.load(tmp_path / "manifest.tsv")
    assert [r.split for r in loaded].count("train") == 6
    for r in loaded:
        clean, noisy = loaded.load_pair(r)
        noise = read_wav(loaded.resolve(r.noise_path))
        assert abs(snr_db(clean, noise) - r.snr_db) < 1e-6
        assert min(round(r.snr_db / 5) * 5 - r.snr_db, 0) > -0.01  # near a requested level
        for a in (clean, noisy, noise):
            assert np.max(np.abs(a.samples)) <= 1.0
        stored = read_wav(tmp_path / "noisy" / r.clean_path.split("/")[-1])
        assert np.array_equal(stored.samples, noisy.samples)


def test_manifest_round_trip_and_missing(tmp_path):
    write_wav(tmp_path / "a.wav", AudioBuffer(np.zeros(10)))
    m = Manifest([ManifestRecord("a.wav", None, None, "train")], tmp_path)
    m.save(tmp_path / "m.tsv")
    back = Manifest.load(tmp_path / "m.tsv")
    assert back[0] == m[0]
    Manifest([ManifestRecord("a.wav", "b.wav", 5.0, "test"),
              ManifestRecord("c.wav", None, None, "test")], tmp_path).save(tmp_path / "bad.tsv")
    with pytest.raises(FileNotFoundError, match="b.wav, c.wav"):
        Manifest.load(tmp_path / "bad.tsv")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 3.0), st.integers(0, 2 ** 32 - 1))
def test_synth_speech_is_never_silent(duration, seed):
    x = synth_speech(duration, np.random.default_rng(seed))
    assert x.size == int(round(duration * 16000))
    assert np.max(np.abs(x)) > 0.1
