"""Log-mel spectrograms and alignment of audio windows to video clips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile


@dataclass
class AudioTrack:
    samples: np.ndarray  # mono float in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:  # stereo: mixdown by channel mean
            s = s.mean(axis=1)
        elif s.ndim != 1:
            raise ValueError("invalid dsp config: samples must be 1-D or 2-D")
        if self.sample_rate <= 0:
            raise ValueError("invalid dsp config: sample_rate")
        if not np.isfinite(s).all():
            raise ValueError("invalid dsp config: non-finite samples")
        self.samples = s

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # (n_mels, frames) natural-log power
    times: np.ndarray  # (frames,) frame-center seconds
    sample_rate: int
    n_fft: int
    hop: int
    n_mels: int
    fmin: float
    fmax: float
    floor: float

    @property
    def frames(self):
        return self.values.shape[1]


def hann_periodic(n):
    """Periodic Hann window 0.5*(1 - cos(2*pi*k/N)), endpoint excluded."""
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def stft_power(samples, n_fft, hop):
    """Magnitude-squared STFT, no centering: 1 + floor((len-n_fft)/hop) frames."""
    samples = np.asarray(samples, dtype=np.float64)
    if n_fft <= 0 or hop <= 0:
        raise ValueError("invalid dsp config: n_fft/hop")
    if n_fft > len(samples):
        raise ValueError("invalid dsp config: n_fft exceeds signal length")
    n_frames = 1 + (len(samples) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * hann_periodic(n_fft)[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T  # (n_fft//2+1, n_frames)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    mel = 3.0 * f / 200.0
    log_region = f >= 1000.0
    return np.where(log_region, 15.0 + 27.0 * np.log(np.maximum(f, 1e-12) / 1000.0) / np.log(6.4), mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    hz = 200.0 * m / 3.0
    log_region = m >= 15.0
    return np.where(log_region, 1000.0 * np.exp(np.log(6.4) * (m - 15.0) / 27.0), hz)


def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    """Triangular mel filters with Slaney area normalization, (n_mels, n_fft//2+1)."""
    if n_mels <= 0:
        raise ValueError("invalid dsp config: n_mels")
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError("invalid dsp config: fmin/fmax")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def log_mel(track: AudioTrack, n_fft=1024, hop=441, n_mels=64, fmin=30.0, fmax=8000.0, floor=1e-10) -> Spectrogram:
    """Hann STFT power -> mel filterbank -> log(max(power, floor))."""
    if floor <= 0:
        raise ValueError("invalid dsp config: floor")
    power = stft_power(track.samples, n_fft, hop)
    fb = mel_filterbank(track.sample_rate, n_fft, n_mels, fmin, fmax)
    mel_power = fb @ power
    values = np.log(np.maximum(mel_power, floor))
    n_frames = values.shape[1]
    times = (hop * np.arange(n_frames) + n_fft / 2.0) / track.sample_rate
    return Spectrogram(
        values=values,
        times=times,
        sample_rate=track.sample_rate,
        n_fft=n_fft,
        hop=hop,
        n_mels=n_mels,
        fmin=fmin,
        fmax=fmax,
        floor=floor,
    )


def clip_window(spec: Spectrogram, fps, t0, T):
    """Spectrogram columns for video frames [t0, t0+T), padded to a fixed width.

    Selects columns whose frame-center times fall in [t0/fps, (t0+T)/fps) and
    pads symmetrically with log(floor) to W = round(T*sample_rate/(fps*hop)).
    """
    if fps <= 0 or T <= 0:
        raise ValueError("invalid dsp config: fps/T")
    start = t0 / fps
    stop = (t0 + T) / fps
    track_dur = (spec.frames - 1) * spec.hop / spec.sample_rate + spec.n_fft / spec.sample_rate
    if t0 < 0 or start >= track_dur or stop > track_dur + spec.hop / spec.sample_rate:
        raise ValueError("window out of bounds")
    W = int(round(T * spec.sample_rate / (fps * spec.hop)))
    sel = (spec.times >= start) & (spec.times < stop)
    cols = spec.values[:, sel]
    n = cols.shape[1]
    if n > W:
        cols = cols[:, :W]
        n = W
    pad_l = (W - n) // 2
    pad_r = W - n - pad_l
    fill = np.log(spec.floor)
    out = np.full((spec.n_mels, W), fill)
    out[:, pad_l : pad_l + n] = cols
    return out


def load_wav(path) -> AudioTrack:
    try:
        sr, data = scipy.io.wavfile.read(path)
    except Exception:
        raise ValueError(f"corrupt dataset: {path}") from None
    data = np.asarray(data)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        samples = data.astype(np.float64)
    return AudioTrack(samples=samples, sample_rate=int(sr))


def save_wav(path, track: AudioTrack):
    scipy.io.wavfile.write(path, track.sample_rate, track.samples.astype(np.float32))


def save_spectrogram(path, spec: Spectrogram):
    """Raw float32 matrix behind a one-line text header."""
    with open(path, "wb") as fh:
        fh.write(
            f"QFSPEC 1\n{spec.n_mels} {spec.frames} {spec.sample_rate} "
            f"{spec.n_fft} {spec.hop} {spec.fmin} {spec.fmax} {spec.floor}\n".encode("ascii")
        )
        fh.write(spec.values.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        magic = fh.readline()
        header = fh.readline()
        raw = fh.read()
    if magic.strip() != b"QFSPEC 1":
        raise ValueError(f"corrupt dataset: {path}")
    parts = header.split()
    if len(parts) != 8:
        raise ValueError(f"corrupt dataset: {path}")
    n_mels, frames, sr, n_fft, hop = (int(x) for x in parts[:5])
    fmin, fmax, floor = (float(x) for x in parts[5:])
    vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if vals.size != n_mels * frames:
        raise ValueError(f"corrupt dataset: {path}")
    times = (hop * np.arange(frames) + n_fft / 2.0) / sr
    return Spectrogram(
        values=vals.reshape(n_mels, frames),
        times=times,
        sample_rate=sr,
        n_fft=n_fft,
        hop=hop,
        n_mels=n_mels,
        fmin=fmin,
        fmax=fmax,
        floor=floor,
    )
