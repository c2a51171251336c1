"""Log-Mel features aligned to visual frames.

Each visual frame ``t`` (time ``t / fps``) is described by the 600 ms of audio
from 500 ms before to 100 ms after it. That snippet is reflect-padded by half
an analysis window on both sides and cut into 60 Hann-windowed frames of 800
samples with a 160-sample hop, transformed with a 1024-point FFT and pooled
into 80 HTK Mel bands covering 0-8 kHz.
"""
import numpy as np

SAMPLE_RATE = 16000
WINDOW_BEFORE = 8000  # 500 ms
WINDOW_AFTER = 1600  # 100 ms
SNIPPET = WINDOW_BEFORE + WINDOW_AFTER
HOP = 160
WIN = 800
N_FFT = 1024
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10
FRAMES_PER_SNIPPET = 1 + (SNIPPET - 1) // HOP  # 60


class AudioFeatureError(ValueError):
    pass


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return points[1:-1]


def mel_filterbank(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, f_min=F_MIN, f_max=F_MAX):
    """Triangular HTK filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None] - lower) / (center - lower)
    falling = (upper - freqs[None]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERS = mel_filterbank()
_WINDOW = np.hanning(WIN + 1)[:-1]  # periodic Hann


def num_visual_frames(num_samples, fps=30, sr=SAMPLE_RATE):
    return int(num_samples * fps // sr)


def frame_sample_index(t, fps=30, sr=SAMPLE_RATE):
    """Sample index of visual frame ``t``."""
    return np.rint(np.asarray(t) * sr / fps).astype(np.int64)


def log_mel_frames(snippets):
    """Log-Mel frames for an array of snippets, shape (..., SNIPPET) -> (..., 60, 80)."""
    snippets = np.asarray(snippets, dtype=np.float64)
    lead = snippets.shape[:-1]
    flat = snippets.reshape(-1, snippets.shape[-1])
    padded = np.pad(flat, ((0, 0), (WIN // 2, WIN // 2)), mode="reflect")
    starts = np.arange(FRAMES_PER_SNIPPET) * HOP
    idx = starts[:, None] + np.arange(WIN)[None]
    frames = padded[:, idx] * _WINDOW
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1)) ** 2
    mel = spec @ _FILTERS.T
    out = np.log(np.maximum(mel, LOG_FLOOR))
    return out.reshape(*lead, FRAMES_PER_SNIPPET, N_MELS)


def mel_spectrogram(waveform, num_frames=None, fps=30, sample_rate=SAMPLE_RATE):
    """Per-visual-frame log-Mel blocks, shape (T, 60, 80), float32.

    ``num_frames`` defaults to the number of whole visual frames in the
    waveform.
    """
    if sample_rate != SAMPLE_RATE:
        raise AudioFeatureError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise AudioFeatureError("expected mono waveform")
    if num_frames is None:
        num_frames = num_visual_frames(len(waveform), fps)
    if num_frames < 1:
        raise AudioFeatureError(
            f"waveform of {len(waveform)} samples is shorter than one visual frame")
    padded = np.pad(waveform, (WINDOW_BEFORE, WINDOW_AFTER + SAMPLE_RATE // fps + 1))
    centers = frame_sample_index(np.arange(num_frames), fps) + WINDOW_BEFORE
    if centers[-1] + WINDOW_AFTER > len(padded):
        raise AudioFeatureError("waveform too short for the requested number of frames")
    idx = (centers - WINDOW_BEFORE)[:, None] + np.arange(SNIPPET)[None]
    return log_mel_frames(padded[idx]).astype(np.float32)
