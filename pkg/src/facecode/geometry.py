"""Mesh data types, region labels, vertex masks and motion statistics.

All coordinates are in millimeters.
"""
from dataclasses import dataclass, field

import numpy as np

REGIONS = ("other", "mouth", "upper_face", "eyelid", "lip")
REGION_CODES = {name: code for code, name in enumerate(REGIONS)}

MASK_KINDS = ("upper", "mouth", "eyelid", "lip")

DEFAULT_W_HIGH = 1.0
DEFAULT_W_LOW = 0.1


class GeometryError(ValueError):
    pass


@dataclass
class TemplateMesh:
    vertices: np.ndarray
    region_labels: list
    identity_id: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or len(self.vertices) == 0:
            raise GeometryError(f"template vertices must be Vx3 with V>0, got {self.vertices.shape}")
        self.region_labels = list(self.region_labels)
        if len(self.region_labels) != len(self.vertices):
            raise GeometryError(
                f"{len(self.region_labels)} region labels for {len(self.vertices)} vertices")
        for label in self.region_labels:
            if label not in REGION_CODES:
                raise GeometryError(f"unknown region label {label!r}")

    @property
    def num_vertices(self):
        return len(self.vertices)

    def region_indices(self, region):
        return np.array([i for i, r in enumerate(self.region_labels) if r == region], dtype=np.int64)

    def label_codes(self):
        return np.array([REGION_CODES[r] for r in self.region_labels], dtype=np.uint8)


@dataclass
class MeshSequence:
    frames: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise GeometryError(f"mesh sequence must be TxVx3, got {self.frames.shape}")
        if self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise GeometryError("mesh sequence needs T >= 1 and V >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise GeometryError("mesh sequence contains non-finite coordinates")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def num_vertices(self):
        return self.frames.shape[1]

    def check_template(self, template):
        if template.num_vertices != self.num_vertices:
            raise GeometryError(
                f"sequence has V={self.num_vertices}, template has V={template.num_vertices}")


@dataclass
class VertexMask:
    weights: np.ndarray
    kind: str = field(default="upper")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in MASK_KINDS:
            raise GeometryError(f"unknown mask kind {self.kind!r}")
        if np.any(self.weights < 0):
            raise GeometryError("mask weights must be non-negative")
        if self.kind in ("eyelid", "lip") and not np.all((self.weights == 0) | (self.weights == 1)):
            raise GeometryError(f"{self.kind} mask must be binary")

    def __len__(self):
        return len(self.weights)


def build_masks(labels, w_high=DEFAULT_W_HIGH, w_low=DEFAULT_W_LOW):
    """Build the (upper, mouth, eyelid, lip) vertex masks from region labels.

    Upper-face and eyelid vertices get ``w_high`` in the upper mask, mouth and
    lip vertices get ``w_high`` in the mouth mask; everything else gets
    ``w_low``. Vertices labeled ``other`` are weak in both.
    """
    if not w_high > w_low >= 0:
        raise GeometryError(f"need w_high > w_low >= 0, got w_high={w_high}, w_low={w_low}")
    labels = list(labels)
    unknown = sorted({l for l in labels if l not in REGION_CODES})
    if unknown:
        raise GeometryError(f"unknown region labels: {unknown}")

    labels = np.array(labels, dtype=object)
    is_upper = np.isin(labels, ["upper_face", "eyelid"])
    is_mouth = np.isin(labels, ["mouth", "lip"])
    upper = np.where(is_upper, w_high, w_low)
    mouth = np.where(is_mouth, w_high, w_low)
    eyelid = (labels == "eyelid").astype(np.float64)
    lip = (labels == "lip").astype(np.float64)
    return (
        VertexMask(upper, "upper"),
        VertexMask(mouth, "mouth"),
        VertexMask(eyelid, "eyelid"),
        VertexMask(lip, "lip"),
    )


def vertex_motion_stddev(sequences):
    """Per-vertex motion magnitude pooled over all frames of all sequences.

    Standard deviation is taken per coordinate, then combined with the
    Euclidean norm. Returns an array of length V.
    """
    sequences = list(sequences)
    if not sequences:
        raise GeometryError("vertex_motion_stddev needs at least one sequence")
    frames = [s.frames if isinstance(s, MeshSequence) else np.asarray(s, dtype=np.float64)
              for s in sequences]
    num_vertices = {f.shape[1] for f in frames}
    if len(num_vertices) != 1:
        raise GeometryError(f"sequences disagree on V: {sorted(num_vertices)}")
    pooled = np.concatenate(frames, axis=0)
    return np.linalg.norm(pooled.std(axis=0), axis=-1)
