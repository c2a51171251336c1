"""Encoders from (expression, audio) to a multi-head categorical latent code.

Shapes follow the batch-first convention: meshes are (B, T, V, 3) in mm,
audio features (B, T, 60, 80), logits (B, T, H, C).
"""
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audiofeat import FRAMES_PER_SNIPPET, LOG_FLOOR, N_MELS

COORD_SCALE = 0.02  # mm -> network units
FEAT_SHIFT = -10.0
FEAT_SCALE = 10.0
OUTPUT_INIT_GAIN = 5.0

CATEGORIZE_MODES = ("sample_soft", "sample_hard", "argmax")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


@dataclass
class HyperParams:
    num_vertices: int = 240
    num_classes: int = 32
    num_heads: int = 8
    d_audio: int = 128
    d_expr: int = 128
    d_fuse: int = 128
    audio_channels: int = 32
    audio_kernel: int = 3
    audio_layers: int = 4
    expr_hidden: int = 256
    code_embed: int = 16
    dec_widths: tuple = (256, 128, 64)
    dec_lstm: int = 128
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_anneal_steps: int = 25000
    use_audio: bool = True
    latent: str = "categorical"
    continuous_dim: int = 32

    def __post_init__(self):
        self.dec_widths = tuple(int(w) for w in self.dec_widths)
        if self.num_classes < 2 or self.num_heads < 1:
            raise ValueError(f"need C >= 2 and H >= 1, got C={self.num_classes}, H={self.num_heads}")
        if self.latent not in ("categorical", "continuous"):
            raise ValueError(f"unknown latent type {self.latent!r}")
        if len(self.dec_widths) != 3:
            raise ValueError("decoder needs exactly three template-encoder widths")

    def to_dict(self):
        d = asdict(self)
        d["dec_widths"] = list(self.dec_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def temperature(self, step):
        """Gumbel temperature, annealed geometrically from tau_start to tau_end."""
        frac = min(1.0, step / max(1, self.tau_anneal_steps))
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


@dataclass
class LatentCode:
    """Categorical code: ``labels`` (T, H) in 0..C-1, ``soft`` (T, H, C)."""
    labels: np.ndarray
    soft: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.soft is None:
            raise ShapeError("soft one-hot required; use LatentCode.from_labels")
        self.soft = np.asarray(self.soft)

    @classmethod
    def from_labels(cls, labels, num_classes):
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, np.eye(num_classes, dtype=np.float32)[labels])

    @property
    def shape(self):
        return self.labels.shape


def gumbel_noise(shape, generator=None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    eps = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(eps))).clamp_min(eps))


def categorize(logits, tau=1.0, mode="argmax", generator=None, noise=None):
    """Turn logits (..., C) into (labels, soft one-hot).

    Sampling modes draw from the tempered distribution softmax(logits / tau)
    with the Gumbel-max trick and relax the draw as softmax(logits / tau + g),
    so tau -> 0 recovers argmax. ``sample_soft`` returns the relaxed sample,
    ``sample_hard`` an exact one-hot whose gradient is that of the relaxed
    sample, ``argmax`` a deterministic one-hot.
    """
    if mode not in CATEGORIZE_MODES:
        raise ValueError(f"unknown categorization mode {mode!r}")
    if not torch.isfinite(logits).all():
        raise NonFiniteError("non-finite logits")
    num_classes = logits.shape[-1]
    if mode == "argmax":
        labels = logits.argmax(-1)
        return labels, F.one_hot(labels, num_classes).to(logits.dtype)
    if tau <= 0:
        raise ValueError("temperature must be positive for sampling")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    y = torch.softmax(logits / tau + noise, dim=-1)
    labels = y.argmax(-1)
    if mode == "sample_soft":
        return labels, y
    hard = F.one_hot(labels, num_classes).to(y.dtype)
    return labels, hard - y.detach() + y


class AudioEncoder(nn.Module):
    """Four strided 1D convolutions over the 60 Mel frames of each visual frame.

    Every visual frame is encoded from its own 600 ms block only, so the
    receptive field along the visual time axis is exactly one frame. The
    first convolution is unpadded, which lets the fixed input normalization
    be folded into its weights.
    """

    def __init__(self, hp):
        super().__init__()
        ch, k = hp.audio_channels, hp.audio_kernel
        layers, length, in_ch = [], FRAMES_PER_SNIPPET, N_MELS
        for i in range(hp.audio_layers):
            pad = 0 if i == 0 else k // 2
            layers.append(nn.Conv1d(in_ch, ch, k, stride=2, padding=pad))
            length = (length + 2 * pad - k) // 2 + 1
            in_ch = ch
        self.convs = nn.ModuleList(layers)
        self.out = nn.Linear(ch * length, hp.d_audio)

    def forward(self, feats):
        if feats.shape[-2:] != (FRAMES_PER_SNIPPET, N_MELS):
            raise ShapeError(f"expected (..., {FRAMES_PER_SNIPPET}, {N_MELS}) features, got {tuple(feats.shape)}")
        lead = feats.shape[:-2]
        first = self.convs[0]
        weight = first.weight / FEAT_SCALE
        bias = first.bias - FEAT_SHIFT * weight.sum((1, 2))
        h = feats.reshape(-1, *feats.shape[-2:]).transpose(1, 2)
        h = F.leaky_relu(F.conv1d(h, weight, bias, stride=first.stride), 0.2)
        for conv in self.convs[1:]:
            h = F.leaky_relu(conv(h), 0.2)
        return self.out(h.flatten(1)).reshape(*lead, -1)


class ExpressionEncoder(nn.Module):
    """Three fully connected layers then a forward LSTM over frames.

    Meshes are standardized per coordinate with statistics fitted on the
    training set (``fit_normalization``) and kept as buffers.
    """

    def __init__(self, hp):
        super().__init__()
        self.num_vertices = hp.num_vertices
        self.register_buffer("input_mean", torch.zeros(hp.num_vertices * 3))
        self.register_buffer("input_scale", torch.full((hp.num_vertices * 3,), COORD_SCALE))
        self.fc = nn.Sequential(
            nn.Linear(hp.num_vertices * 3, hp.expr_hidden), nn.LayerNorm(hp.expr_hidden), nn.LeakyReLU(0.2),
            nn.Linear(hp.expr_hidden, hp.expr_hidden), nn.LayerNorm(hp.expr_hidden), nn.LeakyReLU(0.2),
            nn.Linear(hp.expr_hidden, hp.d_expr), nn.LayerNorm(hp.d_expr), nn.LeakyReLU(0.2),
        )
        self.lstm = nn.LSTM(hp.d_expr, hp.d_expr, batch_first=True)

    @torch.no_grad()
    def fit_normalization(self, frames, min_std=0.5):
        flat = frames.reshape(-1, self.num_vertices * 3).double()
        self.input_mean.copy_(flat.mean(0))
        self.input_scale.copy_(1.0 / flat.std(0).clamp_min(min_std))

    def forward(self, frames):
        if frames.shape[-2:] != (self.num_vertices, 3):
            raise ShapeError(f"expected V={self.num_vertices} meshes, got {tuple(frames.shape)}")
        B, T = frames.shape[:2]
        h = (frames.reshape(B, T, -1) - self.input_mean) * self.input_scale
        return self.lstm(self.fc(h))[0]


class Fusion(nn.Module):
    """Per-frame three-layer MLP producing H x C logits (or Gaussian parameters)."""

    def __init__(self, hp, out_dim):
        super().__init__()
        in_dim = hp.d_expr + (hp.d_audio if hp.use_audio else 0)
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hp.d_fuse), nn.LayerNorm(hp.d_fuse), nn.LeakyReLU(0.2),
            nn.Linear(hp.d_fuse, hp.d_fuse), nn.LayerNorm(hp.d_fuse), nn.LeakyReLU(0.2),
            nn.Linear(hp.d_fuse, out_dim),
        )
        # Start with logits well above the Gumbel noise scale so hard samples
        # carry input information from the first step.
        with torch.no_grad():
            self.mlp[-1].weight.mul_(OUTPUT_INIT_GAIN)

    def forward(self, audio_emb, expr_emb):
        if audio_emb is not None:
            if audio_emb.shape[:-1] != expr_emb.shape[:-1]:
                raise ShapeError(f"audio embedding {tuple(audio_emb.shape)} and expression "
                                 f"embedding {tuple(expr_emb.shape)} disagree on T")
            expr_emb = torch.cat([audio_emb, expr_emb], dim=-1)
        return self.mlp(expr_emb)


class LatentEncoder(nn.Module):
    def __init__(self, hp):
        super().__init__()
        self.hp = hp
        self.audio = AudioEncoder(hp) if hp.use_audio else None
        self.expression = ExpressionEncoder(hp)
        out_dim = (hp.num_heads * hp.num_classes if hp.latent == "categorical"
                   else 2 * hp.continuous_dim)
        self.fusion = Fusion(hp, out_dim)

    def encode_audio(self, feats):
        if self.audio is None:
            return None
        return self.audio(feats)

    def encode_expression(self, frames):
        return self.expression(frames)

    def forward(self, frames, feats):
        """Logits (B, T, H, C) for categorical, or (mean, logvar) for continuous."""
        expr = self.encode_expression(frames)
        audio = self.encode_audio(feats) if feats is not None else None
        if self.audio is not None and audio is None:
            raise ShapeError("this encoder needs audio features")
        out = self.fusion(audio, expr)
        if self.hp.latent == "continuous":
            mean, logvar = out.chunk(2, dim=-1)
            return mean, logvar.clamp(-12.0, 6.0)
        return out.reshape(*out.shape[:-1], self.hp.num_heads, self.hp.num_classes)
