"""Metrics and analyses: lip error, latent cluster separation, modality influence."""
from dataclasses import dataclass
import logging

import numpy as np
import torch

from .formats import atomic_write, write_vmap
from .geometry import GeometryError, MeshSequence, VertexMask, vertex_motion_stddev

log = logging.getLogger(__name__)

MIN_CLUSTER_SAMPLES = 10


class EvalError(ValueError):
    pass


def _frames(seq):
    return seq.frames if isinstance(seq, MeshSequence) else np.asarray(seq, dtype=np.float64)


def lip_error(pred, gt, lip):
    """Per frame, the largest Euclidean error over lip vertices; averaged over frames (mm)."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise GeometryError(f"prediction {p.shape} and ground truth {g.shape} differ")
    w = lip.weights if isinstance(lip, VertexMask) else np.asarray(lip)
    idx = np.flatnonzero(w > 0)
    if idx.size == 0:
        raise EvalError("lip mask selects no vertices")
    if len(w) != p.shape[1]:
        raise GeometryError(f"lip mask has {len(w)} entries for V={p.shape[1]}")
    err = np.linalg.norm(p[:, idx] - g[:, idx], axis=-1)
    return float(err.max(axis=1).mean())


def mean_lip_error(preds, gts, lip):
    return float(np.mean([lip_error(p, g, lip) for p, g in zip(preds, gts)]))


def upper_face_motion(sequences, labels):
    """Mean vertex_motion_stddev over upper-face and eyelid vertices."""
    labels = np.asarray(labels, dtype=object)
    sel = np.isin(labels, ["upper_face", "eyelid"])
    return float(vertex_motion_stddev(sequences)[sel].mean())


# ---------------------------------------------------------------- encoding helpers

def _tensors(sample):
    x = torch.as_tensor(np.asarray(sample.sequence.frames, dtype=np.float32))[None]
    a = torch.as_tensor(np.asarray(sample.featurize(), dtype=np.float32))[None]
    h = torch.as_tensor(np.asarray(sample.template.vertices, dtype=np.float32))[None]
    return h, x, a


@torch.no_grad()
def code_features(model, frames, feats):
    """Per-frame code representation: softmax probabilities (T, H, C) or latent mean (T, D)."""
    out = model.encoder(frames, feats)
    if model.hp.latent == "continuous":
        return out[0][0]
    return torch.softmax(out, dim=-1)[0]


@torch.no_grad()
def corpus_codes(model, samples):
    """Argmax labels (N, T, H) for the categorical latent, latent means (N, T, D) otherwise."""
    codes = []
    for s in samples:
        _, x, a = _tensors(s)
        out = model.encoder(x, a)
        codes.append(out[0][0].numpy() if model.hp.latent == "continuous"
                     else out[0].argmax(-1).numpy())
    return np.stack(codes)


# ---------------------------------------------------------------- cluster analysis

@dataclass
class ClusterAnalysis:
    accuracy: float
    projections: np.ndarray  # (N, 2)
    tags: np.ndarray  # 0 = varied audio, 1 = varied expression

    def as_dict(self):
        return {"accuracy": self.accuracy, "projections": self.projections, "tags": self.tags}


def pca_2d(points):
    """Project onto the two leading principal components."""
    X = np.asarray(points, dtype=np.float64)
    X = X - X.mean(0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], X.shape[1]))])
    return X @ comps.T


def separability(set_a, set_b, seed=0, test_fraction=0.3):
    """Held-out accuracy of a linear classifier separating two point sets, plus a 2D projection."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    A, B = np.asarray(set_a, dtype=np.float64), np.asarray(set_b, dtype=np.float64)
    if len(A) < MIN_CLUSTER_SAMPLES or len(B) < MIN_CLUSTER_SAMPLES:
        raise EvalError(f"need at least {MIN_CLUSTER_SAMPLES} codes per set, got {len(A)} and {len(B)}")
    X = np.concatenate([A, B]).reshape(len(A) + len(B), -1)
    y = np.r_[np.zeros(len(A), int), np.ones(len(B), int)]
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_fraction, random_state=seed, stratify=y)
    mu, sd = Xtr.mean(0), Xtr.std(0) + 1e-8
    clf = LogisticRegression(C=1.0, max_iter=2000)
    clf.fit((Xtr - mu) / sd, ytr)
    acc = float((clf.predict((Xte - mu) / sd) == yte).mean())
    return ClusterAnalysis(acc, pca_2d(X), y)


@torch.no_grad()
def latent_cluster_analysis(model, dataset, n_samples=40, anchor=0, seed=0):
    """How well codes from varied audio separate from codes from varied expressions.

    S_audio holds codes from the anchor sample's expression with each other
    sample's audio; S_expr holds codes from the anchor's audio with each other
    sample's expression. Each code is the time-averaged softmax over classes,
    concatenated across heads.
    """
    samples = list(dataset)
    others = [s for i, s in enumerate(samples) if i != anchor][:n_samples]
    if len(others) < MIN_CLUSTER_SAMPLES:
        raise EvalError(f"need at least {MIN_CLUSTER_SAMPLES} samples, got {len(others)}")
    _, x0, a0 = _tensors(samples[anchor])
    s_audio, s_expr = [], []
    for s in others:
        _, x, a = _tensors(s)
        T = min(x0.shape[1], x.shape[1])
        s_audio.append(code_features(model, x0[:, :T], a[:, :T]).mean(0).flatten().numpy())
        s_expr.append(code_features(model, x[:, :T], a0[:, :T]).mean(0).flatten().numpy())
    res = separability(s_audio, s_expr, seed=seed)
    log.info("latent cluster analysis: accuracy %.3f over %d + %d codes", res.accuracy, len(s_audio), len(s_expr))
    return res


# ---------------------------------------------------------------- influence maps

@torch.no_grad()
def modality_influence_map(model, dataset, max_pairs=None):
    """Per-vertex mean displacement when one modality varies and the other is fixed.

    For each sample i and its successor j, the decoded output on i's template
    with (x_i, a_i) is compared against (x_i, a_j) for audio influence and
    (x_j, a_i) for expression influence. Codes use argmax categorization.
    """
    samples = list(dataset)
    if len(samples) < 2:
        raise EvalError("influence maps need at least two samples")
    n = len(samples) if max_pairs is None else min(max_pairs, len(samples))
    audio_inf, expr_inf = 0.0, 0.0
    for i in range(n):
        h, x, a = _tensors(samples[i])
        _, x2, a2 = _tensors(samples[(i + 1) % len(samples)])
        T = min(x.shape[1], x2.shape[1])
        x, a, x2, a2 = x[:, :T], a[:, :T], x2[:, :T], a2[:, :T]
        base = model.decode(h, model.encode(x, a, "argmax"))
        with_audio = model.decode(h, model.encode(x, a2, "argmax"))
        with_expr = model.decode(h, model.encode(x2, a, "argmax"))
        audio_inf = audio_inf + (with_audio - base).norm(dim=-1).mean(dim=(0, 1)).numpy()
        expr_inf = expr_inf + (with_expr - base).norm(dim=-1).mean(dim=(0, 1)).numpy()
    return np.asarray(audio_inf / n, dtype=np.float64), np.asarray(expr_inf / n, dtype=np.float64)


def region_means(values, labels, regions=("lip", "eyelid")):
    labels = np.asarray(labels, dtype=object)
    return {r: float(np.asarray(values)[labels == r].mean()) for r in regions}


def export_influence(directory, audio_influence, expr_influence):
    """Write the two heatmaps as VMAP files; returns their paths."""
    import os

    os.makedirs(directory, exist_ok=True)
    paths = (os.path.join(directory, "audio_influence.vmap"),
             os.path.join(directory, "expression_influence.vmap"))
    write_vmap(paths[0], audio_influence)
    write_vmap(paths[1], expr_influence)
    return paths


# ---------------------------------------------------------------- reports

def format_report(metrics, title=None):
    """Human-readable metric report, one line per metric."""
    lines = [title] if title else []
    for k, v in metrics.items():
        lines.append(f"{k}: {v:.3f}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines) + "\n"


def kv_report(metrics):
    """Machine-readable ``key=value`` lines with full float precision."""
    return "".join(f"{k}={float(v)!r}\n" if isinstance(v, (float, np.floating)) else f"{k}={v}\n"
                   for k, v in metrics.items())


def write_reports(prefix, metrics, title=None):
    atomic_write(prefix + ".txt", format_report(metrics, title).encode())
    atomic_write(prefix + ".kv", kv_report(metrics).encode())
