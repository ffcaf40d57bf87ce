"""Log-mel extraction, window alignment, DSP invariants."""

import numpy as np
import pytest

import quadfit.audio as au

SR = 44100


def test_silence_is_log_floor():
    track = au.AudioTrack(np.zeros(SR), SR)
    spec = au.log_mel(track, floor=1e-10)
    np.testing.assert_allclose(spec.values, np.log(1e-10), atol=1e-12)


def test_tone_lands_in_its_mel_band():
    n_fft, n_mels, fmin, fmax = 1024, 64, 30.0, 8000.0
    edges = au.mel_to_hz(np.linspace(au.hz_to_mel(fmin), au.hz_to_mel(fmax), n_mels + 2))
    band = 40
    f0 = edges[band + 1]  # center frequency of that band
    t = np.arange(SR) / SR
    track = au.AudioTrack(np.sin(2.0 * np.pi * f0 * t), SR)
    spec = au.log_mel(track, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)
    interior = spec.values[:, 2:-2]
    assert (interior.argmax(axis=0) == band).all()


def test_stft_parseval_per_frame(rng):
    n_fft, hop = 512, 128
    x = rng.normal(scale=0.2, size=4096)
    power = au.stft_power(x, n_fft, hop)  # (bins, frames)
    w = au.hann_periodic(n_fft)
    n_frames = power.shape[1]
    for f in range(n_frames):
        seg = x[f * hop : f * hop + n_fft] * w
        energy = (seg * seg).sum()
        # one-sided spectrum: interior bins count twice
        p = power[:, f]
        spectral = (p[0] + p[-1] + 2.0 * p[1:-1].sum()) / n_fft
        assert spectral == pytest.approx(energy, rel=1e-6)


def test_amplitude_scaling_shifts_log_mel(rng):
    x = rng.normal(scale=0.05, size=2 * SR)
    a = 3.7
    s1 = au.log_mel(au.AudioTrack(x, SR))
    s2 = au.log_mel(au.AudioTrack(np.clip(a * x, -1e9, 1e9), SR))
    above = s1.values > np.log(1e-10) + 1e-6
    # wherever both sit above the floor the shift is exactly 2 log a
    both = above & (s2.values > np.log(1e-10) + 1e-6)
    shift = s2.values[both] - s1.values[both]
    np.testing.assert_allclose(shift, 2.0 * np.log(a), rtol=1e-9)


def test_filterbank_triangles():
    fb = au.mel_filterbank(SR, 1024, 64, 30.0, 8000.0)
    freqs = np.arange(1024 // 2 + 1) * (SR / 1024.0)
    interior = (freqs > 300.0) & (freqs < 7500.0)
    assert (fb.sum(axis=0)[interior] > 0).all()
    for m in range(64):
        row = fb[m]
        peak = row.argmax()
        assert row[peak] > 0
        # single peak: nondecreasing up to it, nonincreasing after
        assert (np.diff(row[: peak + 1]) >= -1e-15).all()
        assert (np.diff(row[peak:]) <= 1e-15).all()


def test_log_mel_deterministic_and_pad_invariant(rng):
    x = rng.normal(scale=0.1, size=SR)
    t1 = au.AudioTrack(x, SR)
    a = au.log_mel(t1)
    b = au.log_mel(au.AudioTrack(x.copy(), SR))
    np.testing.assert_array_equal(a.values, b.values)
    # trailing samples short of one more full frame leave columns unchanged
    extra = np.concatenate([x, np.zeros(100)])
    c = au.log_mel(au.AudioTrack(extra, SR))
    np.testing.assert_array_equal(c.values[:, : a.frames], a.values)


def test_clip_window_width():
    track = au.AudioTrack(np.zeros(SR), SR)
    spec = au.log_mel(track)  # hop=441 -> 10 ms
    wnd = au.clip_window(spec, fps=25.0, t0=0, T=5)
    assert wnd.shape == (64, 20)  # 0.2 s / 0.01 s


def test_clip_window_alignment_and_overlap():
    track = au.AudioTrack(np.zeros(SR), SR)
    spec = au.log_mel(track)
    w0 = au.clip_window(spec, fps=25.0, t0=0, T=5)
    assert spec.times[0] >= 0.0
    # 1-frame slide at 25 fps moves 4 hops; windows share W-4 columns
    w1 = au.clip_window(spec, fps=25.0, t0=1, T=5)
    assert w0.shape == w1.shape == (64, 20)

    sel0 = (spec.times >= 0.0) & (spec.times < 5 / 25.0)
    sel1 = (spec.times >= 1 / 25.0) & (spec.times < 6 / 25.0)
    shared = (sel0 & sel1).sum()
    assert shared == 20 - 4


def test_clip_window_out_of_bounds():
    track = au.AudioTrack(np.zeros(SR // 2), SR)
    spec = au.log_mel(track)
    with pytest.raises(ValueError, match="window out of bounds"):
        au.clip_window(spec, fps=25.0, t0=100, T=5)


def test_invalid_dsp_configs():
    with pytest.raises(ValueError, match="invalid dsp config"):
        au.log_mel(au.AudioTrack(np.zeros(100), SR), n_fft=1024)
    with pytest.raises(ValueError, match="invalid dsp config"):
        au.mel_filterbank(SR, 1024, 64, 8000.0, 30.0)
    with pytest.raises(ValueError, match="invalid dsp config"):
        au.AudioTrack(np.zeros(10), 0)
    with pytest.raises(ValueError, match="invalid dsp config"):
        au.AudioTrack(np.array([np.nan, 0.0]), SR)


def test_stereo_mixdown():
    stereo = np.stack([np.ones(100), -np.ones(100)], axis=1)
    track = au.AudioTrack(stereo, SR)
    np.testing.assert_allclose(track.samples, np.zeros(100), atol=1e-15)


def test_wav_roundtrip(tmp_path, rng):
    x = np.clip(rng.normal(scale=0.2, size=SR // 4), -1, 1)
    track = au.AudioTrack(x, SR)
    p = tmp_path / "a.wav"
    au.save_wav(p, track)
    back = au.load_wav(p)
    assert back.sample_rate == SR
    np.testing.assert_allclose(back.samples, x, atol=1e-6)


def test_spectrogram_roundtrip(tmp_path, rng):
    x = rng.normal(scale=0.1, size=SR // 2)
    spec = au.log_mel(au.AudioTrack(x, SR))
    p = tmp_path / "s.spec"
    au.save_spectrogram(p, spec)
    back = au.load_spectrogram(p)
    assert back.n_mels == spec.n_mels
    assert back.frames == spec.frames
    np.testing.assert_allclose(back.values, spec.values, atol=1e-5)
    np.testing.assert_allclose(back.times, spec.times, atol=1e-12)


def test_corrupt_spectrogram_file(tmp_path):
    p = tmp_path / "bad.spec"
    p.write_bytes(b"NOTSPEC 9\nnope\n")
    with pytest.raises(ValueError, match="corrupt dataset"):
        au.load_spectrogram(p)
