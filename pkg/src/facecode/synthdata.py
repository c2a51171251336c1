"""Procedural identities, pseudo-speech and paired mesh sequences.

The generator plants a known correlation structure so that cross-modal
claims can be checked against ground truth:

* lips and jaw follow a smoothed envelope of the audio (deterministic),
* eyelids follow an independent Poisson blink process,
* brows rise on a random subset of envelope peaks (weakly audio-correlated).
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .audiofeat import SAMPLE_RATE, frame_sample_index, num_visual_frames
from .geometry import MeshSequence, TemplateMesh

LIP_MAX_MM = 10.0
ENVELOPE_REF = 0.2
SMOOTH_MS = 50.0
BLINK_DEPTH_MM = 10.0
BROW_RAISE_MM = 3.0
BROW_DURATION_S = 0.4


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    lip: int = 24
    mouth: int = 36
    upper_face: int = 120
    eyelid: int = 20
    other: int = 40
    fps: int = 30
    sample_rate: int = SAMPLE_RATE
    blink_rate: float = 0.3
    blink_duration_ms: float = 150.0
    brow_raise_probability: float = 0.5
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lip", "mouth", "upper_face", "eyelid", "other"):
            if getattr(self, name) <= 0:
                raise SynthError(f"vertex count for {name} must be positive")
        if self.lip < 2:
            raise SynthError("need at least two lip vertices (upper and lower lip)")
        if self.sample_rate != SAMPLE_RATE:
            raise SynthError(f"sample_rate is fixed at {SAMPLE_RATE} Hz")

    @property
    def num_vertices(self):
        return self.lip + self.mouth + self.upper_face + self.eyelid + self.other


@dataclass
class GroundTruthTracks:
    lip_opening: np.ndarray
    blink_state: np.ndarray
    brow_raise: np.ndarray
    blink_onsets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_array(self):
        return np.stack([self.lip_opening, self.blink_state, self.brow_raise], axis=1)


@dataclass
class FaceLayout:
    """Canonical labeled face and its per-unit motion fields (V x 3 each)."""
    vertices: np.ndarray
    labels: list
    lip_field: np.ndarray
    blink_field: np.ndarray
    brow_field: np.ndarray
    upper_lip: np.ndarray
    lower_lip: np.ndarray


def _disc_points(n, center, radius, rng):
    r = radius * np.sqrt(rng.uniform(0.05, 1.0, n))
    a = rng.uniform(0, 2 * np.pi, n)
    return np.stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)], axis=1)


_LAYOUT_CACHE = {}


def face_layout(config=None):
    config = config or SynthConfig()
    key = (config.lip, config.mouth, config.upper_face, config.eyelid, config.other)
    if key in _LAYOUT_CACHE:
        return _LAYOUT_CACHE[key]
    rng = np.random.default_rng(12345)
    parts, labels = [], []

    n_up = config.lip // 2
    n_low = config.lip - n_up
    a_up = np.linspace(0.1, np.pi - 0.1, n_up)
    a_low = np.linspace(np.pi + 0.1, 2 * np.pi - 0.1, n_low)
    ang = np.concatenate([a_up, a_low])
    lips = np.stack([25 * np.cos(ang), -35 + 6 * np.sin(ang), 12 + 3 * np.abs(np.sin(ang))], 1)
    parts.append(lips)
    labels += ["lip"] * config.lip

    xy = np.stack([rng.uniform(-45, 45, config.mouth), rng.uniform(-80, -45, config.mouth)], 1)
    mouth = np.column_stack([xy, 5 + 0.1 * (xy[:, 1] + 80)])
    parts.append(mouth)
    labels += ["mouth"] * config.mouth

    xy = np.stack([rng.uniform(-60, 60, config.upper_face), rng.uniform(-5, 60, config.upper_face)], 1)
    for cx in (-30.0, 30.0):  # keep the eye openings clear
        d = xy - np.array([cx, 12.0])
        close = np.hypot(d[:, 0] / 14, d[:, 1] / 7) < 1
        xy[close, 1] += 10
    upper = np.column_stack([xy, 10 - 0.002 * xy[:, 0] ** 2])
    parts.append(upper)
    labels += ["upper_face"] * config.upper_face

    n_left = config.eyelid // 2
    lids, lid_u = [], []
    for cx, n in ((-30.0, n_left), (30.0, config.eyelid - n_left)):
        u = np.linspace(0, 1, n) if n > 1 else np.array([0.5])
        lids.append(np.stack([cx - 12 + 24 * u, 12 + 5 * np.sin(np.pi * u), np.full(n, 15.0)], 1))
        lid_u.append(u)
    eyelid = np.concatenate(lids)
    lid_u = np.concatenate(lid_u)
    parts.append(eyelid)
    labels += ["eyelid"] * config.eyelid

    xy = np.stack([rng.uniform(-70, 70, config.other), rng.uniform(-40, 0, config.other)], 1)
    other = np.column_stack([xy, 30 - 0.005 * xy[:, 0] ** 2])
    parts.append(other)
    labels += ["other"] * config.other

    vertices = np.concatenate(parts)
    V = len(vertices)
    lip_field = np.zeros((V, 3))
    i0 = 0
    lip_field[i0:i0 + n_up, 1] = 0.2
    lip_field[i0 + n_up:i0 + config.lip, 1] = -0.8
    i0 += config.lip
    jaw_weight = np.clip((-45 - mouth[:, 1]) / 35 + 0.3, 0, 1) * np.exp(-(mouth[:, 0] / 40) ** 2)
    lip_field[i0:i0 + config.mouth, 1] = -0.8 * jaw_weight
    i0 += config.mouth

    brow_field = np.zeros((V, 3))
    brow = (upper[:, 1] > 20) & (upper[:, 1] < 40)
    brow_field[i0:i0 + config.upper_face, 1] = np.where(brow, 1.0, 0.0)
    i0 += config.upper_face

    blink_field = np.zeros((V, 3))
    profile = 0.5 + 0.5 * np.sin(np.pi * lid_u)
    blink_field[i0:i0 + config.eyelid, 1] = -profile

    layout = FaceLayout(
        vertices=vertices,
        labels=labels,
        lip_field=lip_field,
        blink_field=blink_field,
        brow_field=brow_field,
        upper_lip=np.arange(0, n_up),
        lower_lip=np.arange(n_up, config.lip),
    )
    _LAYOUT_CACHE[key] = layout
    return layout


def synth_identity(seed, config=None):
    """A labeled face with smooth per-identity shape offsets, deterministic per seed."""
    config = config or SynthConfig()
    layout = face_layout(config)
    rng = np.random.default_rng([seed, 7])
    scale = rng.uniform(0.9, 1.1, 3)
    verts = layout.vertices * scale
    for _ in range(3):
        freq = rng.normal(0, 1 / 40, 3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(0, 1.5, 3)
        verts = verts + amp[None] * np.sin(layout.vertices @ freq + phase)[:, None]
    return TemplateMesh(verts, layout.labels, identity_id=f"id{seed:05d}")


@dataclass
class SpeechSignal:
    waveform: np.ndarray
    envelope: np.ndarray
    syllable_peaks: np.ndarray


def synth_speech(seed, duration_s, amplitude=1.0, sample_rate=SAMPLE_RATE):
    """Harmonic carrier, amplitude-modulated by a 3-5 Hz syllabic envelope with pauses."""
    if duration_s <= 0:
        raise SynthError("duration must be positive")
    rng = np.random.default_rng([seed, 3])
    n = int(np.ceil(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    envelope = np.zeros(n)
    peaks = []
    pos = rng.uniform(0.0, 0.15)
    while pos < duration_s:
        dur = rng.uniform(0.2, 1 / 3)
        amp = rng.uniform(0.3, 1.0)
        i0, i1 = int(pos * sample_rate), min(n, int((pos + dur) * sample_rate))
        if i1 > i0:
            u = (np.arange(i0, i1) / sample_rate - pos) / dur
            envelope[i0:i1] = np.maximum(envelope[i0:i1], amp * np.sin(np.pi * u) ** 2)
        peaks.append(pos + dur / 2)
        pos += dur
        if rng.uniform() < 0.15:
            pos += rng.uniform(0.15, 0.5)

    f0 = rng.uniform(90, 220)
    num_harmonics = int(4000 // f0)
    phases = rng.uniform(0, 2 * np.pi, num_harmonics)
    k = np.arange(1, num_harmonics + 1)
    carrier = (np.sin(2 * np.pi * f0 * np.outer(t, k) + phases) / k).sum(axis=1)
    carrier /= np.abs(carrier).max()
    waveform = 0.9 * amplitude * envelope * carrier
    return SpeechSignal(np.clip(waveform, -1.0, 1.0), amplitude * envelope, np.array(peaks))


def synth_audio(seed, duration_s, amplitude=1.0):
    """16 kHz mono pseudo-speech in [-1, 1], deterministic per seed."""
    return synth_speech(seed, duration_s, amplitude).waveform


def smoothed_envelope(waveform, sample_rate=SAMPLE_RATE):
    """Rectified waveform under a centered 50 ms moving average, per sample."""
    w = np.abs(np.asarray(waveform, dtype=np.float64))
    width = int(round(SMOOTH_MS * sample_rate / 1000))
    kernel = np.ones(width) / width
    return np.convolve(w, kernel, mode="same")


def lip_opening_map(envelope):
    """Fixed monotone map from envelope level to lip opening in mm."""
    return LIP_MAX_MM * np.tanh(np.maximum(envelope, 0.0) / ENVELOPE_REF)


def oracle_lip_trajectory(waveform, fps=30, num_frames=None):
    """Ground-truth lip opening (mm) per visual frame for a 16 kHz waveform."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if num_frames is None:
        num_frames = num_visual_frames(len(waveform), fps)
    env = smoothed_envelope(waveform)
    idx = np.minimum(frame_sample_index(np.arange(num_frames), fps), len(env) - 1)
    return lip_opening_map(env[idx])


def blink_track(num_frames, fps, rng, rate, duration_ms):
    duration = duration_ms / 1000.0
    span = num_frames / fps + duration
    count = rng.poisson(rate * span)
    onsets = np.sort(rng.uniform(-duration, num_frames / fps, count))
    times = np.arange(num_frames) / fps
    state = np.zeros(num_frames)
    for onset in onsets:
        u = (times - onset) / duration
        inside = (u >= 0) & (u <= 1)
        state[inside] = np.maximum(state[inside], np.sin(np.pi * u[inside]) ** 2)
    return state, onsets


def synth_sequence(identity, waveform, seed, config=None):
    """Animate ``identity`` for ``waveform``; returns (MeshSequence, GroundTruthTracks)."""
    config = config or SynthConfig()
    layout = face_layout(config)
    if identity.num_vertices != len(layout.vertices):
        raise SynthError("identity does not match the configured face layout")
    waveform = np.asarray(waveform, dtype=np.float64)
    T = num_visual_frames(len(waveform), config.fps)
    if T < 1:
        raise SynthError(f"waveform of {len(waveform)} samples is shorter than one frame")

    lip = oracle_lip_trajectory(waveform, config.fps, T)

    blink_rng = np.random.default_rng([seed, 11])
    blink, onsets = blink_track(T, config.fps, blink_rng, config.blink_rate,
                                config.blink_duration_ms)

    brow_rng = np.random.default_rng([seed, 13])
    env = smoothed_envelope(waveform)
    peak_idx, _ = find_peaks(env, height=0.03, distance=int(0.15 * SAMPLE_RATE))
    raised = peak_idx[brow_rng.uniform(size=len(peak_idx)) < config.brow_raise_probability]
    times = np.arange(T) / config.fps
    brow = np.zeros(T)
    for p in raised / SAMPLE_RATE:
        u = (times - p) / BROW_DURATION_S + 0.5
        inside = (u >= 0) & (u <= 1)
        brow[inside] = np.maximum(brow[inside], np.sin(np.pi * u[inside]) ** 2)

    frames = (identity.vertices[None]
              + lip[:, None, None] * layout.lip_field[None]
              + (BLINK_DEPTH_MM * blink)[:, None, None] * layout.blink_field[None]
              + (BROW_RAISE_MM * brow)[:, None, None] * layout.brow_field[None])
    tracks = GroundTruthTracks(lip, blink, brow, onsets)
    return MeshSequence(frames, fps=config.fps), tracks


def _project(frames, template, motion_field):
    d = np.asarray(frames, dtype=np.float64) - np.asarray(template, dtype=np.float64)[None]
    return np.tensordot(d, motion_field, axes=([1, 2], [0, 1])) / np.sum(motion_field ** 2)


def measure_lip_opening(frames, template, config=None):
    """Lip opening (mm) per frame, read back from a mesh sequence."""
    return _project(_frames(frames), _verts(template), face_layout(config).lip_field)


def measure_eyelid_closure(frames, template, config=None):
    """Eyelid closure in blink units (1 = fully closed) per frame."""
    return _project(_frames(frames), _verts(template),
                    BLINK_DEPTH_MM * face_layout(config).blink_field)


def measure_brow_raise(frames, template, config=None):
    return _project(_frames(frames), _verts(template),
                    BROW_RAISE_MM * face_layout(config).brow_field)


def _frames(x):
    return x.frames if isinstance(x, MeshSequence) else x


def _verts(x):
    return x.vertices if isinstance(x, TemplateMesh) else x
