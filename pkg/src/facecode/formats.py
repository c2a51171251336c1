"""Little-endian binary file formats, WAV and OBJ I/O.

MSHS  mesh sequence   "MSHS" u32 version u32 T u32 V  f32[T*V*3]
MSHT  template mesh   "MSHT" u32 version u32 V  f32[V*3]  u8[V] region codes
MELS  feature cache   "MELS" u32 version u32 T u32 F u32 M  f32[T*F*M]
LATC  latent codes    "LATC" u32 version u32 T u32 H  u16[T*H] (labels 0..C-1)
VMAP  vertex scalars  "VMAP" u32 V  f32[V]
.gt   ground truth    f32[T*3] (lip_opening, blink_state, brow_raise) per frame
"""
import os
import struct
import tempfile
import wave

import numpy as np

from .audiofeat import SAMPLE_RATE
from .geometry import REGIONS, MeshSequence, TemplateMesh

VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _header(data, magic, fields, path):
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    size = 4 + 4 * fields
    if len(data) < size:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack("<" + "I" * fields, data[4:size]), size


def _payload(data, offset, count, dtype, path):
    dtype = np.dtype(dtype).newbyteorder("<")
    end = offset + count * dtype.itemsize
    if len(data) < end:
        raise FormatError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset), end


def _check_version(version, path):
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")


def mshs_bytes(frames):
    frames = np.asarray(frames.frames if isinstance(frames, MeshSequence) else frames)
    T, V, _ = frames.shape
    return b"MSHS" + struct.pack("<III", VERSION, T, V) + frames.astype("<f4").tobytes()


def write_mshs(path, frames):
    atomic_write(path, mshs_bytes(frames))


def read_mshs(path, fps=30.0):
    data = _read(path)
    (version, T, V), off = _header(data, b"MSHS", 3, path)
    _check_version(version, path)
    arr, end = _payload(data, off, T * V * 3, "f4", path)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return MeshSequence(arr.reshape(T, V, 3).astype(np.float64), fps=fps)


def msht_bytes(template):
    V = template.num_vertices
    return (b"MSHT" + struct.pack("<II", VERSION, V)
            + template.vertices.astype("<f4").tobytes() + template.label_codes().tobytes())


def write_msht(path, template):
    atomic_write(path, msht_bytes(template))


def read_msht(path, identity_id=None):
    data = _read(path)
    (version, V), off = _header(data, b"MSHT", 2, path)
    _check_version(version, path)
    verts, off = _payload(data, off, V * 3, "f4", path)
    codes, end = _payload(data, off, V, "u1", path)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes")
    if codes.max(initial=0) >= len(REGIONS):
        raise FormatError(f"{path}: unknown region code {codes.max()}")
    if identity_id is None:
        identity_id = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return TemplateMesh(verts.reshape(V, 3).astype(np.float64),
                        [REGIONS[c] for c in codes], identity_id)


def mels_bytes(feats):
    feats = np.asarray(feats)
    T, F_, M = feats.shape
    return b"MELS" + struct.pack("<IIII", VERSION, T, F_, M) + feats.astype("<f4").tobytes()


def write_mels(path, feats):
    atomic_write(path, mels_bytes(feats))


def read_mels(path):
    data = _read(path)
    (version, T, F_, M), off = _header(data, b"MELS", 4, path)
    _check_version(version, path)
    arr, end = _payload(data, off, T * F_ * M, "f4", path)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return arr.reshape(T, F_, M).astype(np.float32)


def latc_bytes(labels):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise FormatError("labels must fit in u16")
    T, H = labels.shape
    return b"LATC" + struct.pack("<III", VERSION, T, H) + labels.astype("<u2").tobytes()


def write_latc(path, labels):
    atomic_write(path, latc_bytes(labels))


def read_latc(path):
    data = _read(path)
    (version, T, H), off = _header(data, b"LATC", 3, path)
    _check_version(version, path)
    arr, end = _payload(data, off, T * H, "u2", path)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return arr.reshape(T, H).astype(np.int64)


def vmap_bytes(values):
    values = np.asarray(values)
    return b"VMAP" + struct.pack("<I", len(values)) + values.astype("<f4").tobytes()


def write_vmap(path, values):
    atomic_write(path, vmap_bytes(values))


def read_vmap(path):
    data = _read(path)
    (V,), off = _header(data, b"VMAP", 1, path)
    arr, end = _payload(data, off, V, "f4", path)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return arr.astype(np.float64)


def gt_bytes(tracks):
    arr = tracks.as_array() if hasattr(tracks, "as_array") else np.asarray(tracks)
    return arr.astype("<f4").tobytes()


def write_gt(path, tracks):
    atomic_write(path, gt_bytes(tracks))


def read_gt(path):
    from .synthdata import GroundTruthTracks

    data = _read(path)
    if len(data) % 12:
        raise FormatError(f"{path}: size is not a multiple of 12 bytes")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 3).astype(np.float64)
    return GroundTruthTracks(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


def wav_bytes(waveform, sample_rate=SAMPLE_RATE):
    import io

    pcm = np.clip(np.rint(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, waveform, sample_rate=SAMPLE_RATE):
    atomic_write(path, wav_bytes(waveform, sample_rate))


def read_wav(path):
    """Return (waveform in [-1, 1], sample_rate) for 16-bit PCM mono WAV."""
    with wave.open(os.fspath(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM mono")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def write_obj_frames(directory, frames, prefix="frame"):
    """One OBJ vertex file per frame, for external viewers."""
    frames = frames.frames if isinstance(frames, MeshSequence) else np.asarray(frames)
    os.makedirs(directory, exist_ok=True)
    paths = []
    for t, verts in enumerate(frames):
        lines = "".join(f"v {x:.4f} {y:.4f} {z:.4f}\n" for x, y, z in verts)
        path = os.path.join(directory, f"{prefix}_{t:05d}.obj")
        atomic_write(path, lines.encode())
        paths.append(path)
    return paths
