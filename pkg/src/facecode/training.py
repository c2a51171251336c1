"""Losses, cross reconstructions and the latent-space training loop."""
from dataclasses import asdict, dataclass, field
import logging

import numpy as np
import torch
from torch import nn

from .decoder import MeshDecoder
from .encoder import HyperParams, LatentEncoder, NonFiniteError, ShapeError, categorize
from .geometry import VertexMask, build_masks

log = logging.getLogger(__name__)

MODES = ("expr_only_l2", "expr_audio_l2", "expr_audio_xmod")
LATENTS = ("categorical", "continuous")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "expr_audio_xmod"
    latent: str = "categorical"
    lr: float = 1e-4
    steps: int = 25000
    batch_size: int = 16
    seed: int = 0
    w_high: float = 1.0
    w_low: float = 0.1
    grad_clip: float = 1.0
    kl_weight: float = 1e-3
    crop_frames: int = 32
    sample_mode: str = "sample_soft"  # hard straight-through samples never picked up blinks
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.latent not in LATENTS:
            raise ValueError(f"unknown latent type {self.latent!r}")


class LatentModel(nn.Module):
    """Encoder, categorization and decoder bundled for training and inference."""

    def __init__(self, hp):
        super().__init__()
        self.hp = hp
        self.encoder = LatentEncoder(hp)
        self.decoder = MeshDecoder(hp)

    def encode(self, frames, feats, mode="argmax", tau=1.0, generator=None, noise=None,
               return_kl=False):
        """Code fed to the decoder: soft one-hot (categorical) or z (continuous).

        For the continuous latent ``argmax`` returns the mean and the sampling
        modes draw ``mean + std * eps``. With ``return_kl`` a (code, kl) pair is
        returned, kl being None for the categorical latent.
        """
        kl = None
        if self.hp.latent == "continuous":
            mean, logvar = self.encoder(frames, feats)
            kl = gaussian_kl(mean, logvar)
            if mode == "argmax":
                code = mean
            else:
                eps = noise if noise is not None else torch.randn(
                    mean.shape, generator=generator, dtype=mean.dtype)
                code = mean + torch.exp(0.5 * logvar) * eps
        else:
            logits = self.encoder(frames, feats)
            code = categorize(logits, tau, mode, generator=generator, noise=noise)[1]
        return (code, kl) if return_kl else code

    def decode(self, template, code):
        return self.decoder(template, code)

    def reconstruct(self, template, frames, feats):
        return self.decode(template, self.encode(frames, feats, "argmax"))


def _as_weights(mask, like):
    w = mask.weights if isinstance(mask, VertexMask) else mask
    return torch.as_tensor(np.asarray(w) if not torch.is_tensor(w) else w, dtype=like.dtype)


def _check_shapes(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def masked_sq_error(pred, target, weights):
    """Sum over frames and vertices of weighted squared error, divided by T*V.

    Leading batch dimensions are averaged.
    """
    _check_shapes(pred, target)
    w = _as_weights(weights, pred)
    if w.shape[0] != pred.shape[-2]:
        raise ShapeError(f"mask has {w.shape[0]} entries for V={pred.shape[-2]}")
    sq = ((pred - target) ** 2).sum(-1)
    T, V = pred.shape[-3], pred.shape[-2]
    per_seq = (sq * w).sum((-1, -2)) / (T * V)
    return per_seq.mean()


def cross_modality_loss(h_audio, h_expr, x, upper, mouth):
    return masked_sq_error(h_expr, x, upper) + masked_sq_error(h_audio, x, mouth)


def eyelid_loss(h, x, eyelid):
    return masked_sq_error(h, x, eyelid)


def l2_loss(h, x):
    return masked_sq_error(h, x, torch.ones(x.shape[-2], dtype=x.dtype))


def total_loss(xmod, eyelid):
    return xmod + eyelid


def crop_or_pad(t, length, dim=1):
    """Crop, or edge-pad by repeating the last frame, along ``dim``."""
    n = t.shape[dim]
    if n >= length:
        return t.narrow(dim, 0, length)
    last = t.narrow(dim, n - 1, 1)
    reps = [1] * t.dim()
    reps[dim] = length - n
    return torch.cat([t, last.repeat(*reps)], dim=dim)


def cross_reconstructions(model, x, a, x_other, a_other, template, mode="argmax", tau=1.0,
                          generator=None, return_kl=False):
    """(h_audio, h_expr): decode with the right audio but another expression, and vice versa."""
    T = x.shape[1]
    if a.shape[1] != T:
        raise ShapeError(f"expression has T={T} frames but audio has {a.shape[1]}")
    x_other = crop_or_pad(x_other, T)
    a_other = crop_or_pad(a_other, T)
    frames = torch.cat([x_other, x])
    feats = torch.cat([a, a_other])
    code, kl = model.encode(frames, feats, mode, tau, generator, return_kl=True)
    out = model.decode(torch.cat([template, template]), code)
    h_audio, h_expr = out[: len(x)], out[len(x):]
    return (h_audio, h_expr, kl) if return_kl else (h_audio, h_expr)


def gaussian_kl(mean, logvar):
    return 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).sum(-1).mean()


def training_loss(model, cfg, masks, x, a, template, x_other=None, a_other=None, tau=1.0,
                  generator=None, mode="sample_soft"):
    """Loss for one batch under the configured mode; returns (loss, parts dict)."""
    upper, mouth, eyelid, _ = masks
    if cfg.mode == "expr_audio_xmod":
        h_audio, h_expr, kl = cross_reconstructions(model, x, a, x_other, a_other, template,
                                                    mode, tau, generator, return_kl=True)
        recon = cross_modality_loss(h_audio, h_expr, x, upper, mouth)
        lid = eyelid_loss(h_expr, x, eyelid)
    else:
        feats = a if cfg.mode == "expr_audio_l2" else None
        code, kl = model.encode(x, feats, mode, tau, generator, return_kl=True)
        h = model.decode(template, code)
        recon = l2_loss(h, x)
        lid = eyelid_loss(h, x, eyelid)
    loss = total_loss(recon, lid)
    parts = {"recon": recon.item(), "eyelid": lid.item()}
    if kl is not None:
        loss = loss + cfg.kl_weight * kl
        parts["kl"] = kl.item()
    return loss, parts


@dataclass
class TrainResult:
    model: LatentModel
    losses: list = field(default_factory=list)
    config: TrainConfig = None

    def checkpoint(self):
        from .checkpoint import latent_checkpoint
        return latent_checkpoint(self.model, self.config)


def hparams_for(cfg, num_vertices, **overrides):
    return HyperParams(num_vertices=num_vertices, use_audio=cfg.mode != "expr_only_l2",
                       latent=cfg.latent, **overrides)


def train_latent_model(cfg, corpus, hp=None, log_file=None, callback=None):
    """Train encoder and decoder on the training split of ``corpus``.

    Deterministic given ``cfg.seed``: parameter init, batch order, counterpart
    sampling and Gumbel noise all derive from it. ``callback(step, model)``
    runs after every update.
    """
    train = corpus.split("train") if any(s.split == "train" for s in corpus) else corpus
    if len(train) == 0:
        raise ValueError("no training samples")
    frames, feats, templates = (torch.from_numpy(a) for a in train.arrays())
    # mel-major copy so the audio encoder's channel transpose is free
    feats_cf = feats.transpose(-1, -2).contiguous()
    masks = build_masks(train[0].template.region_labels, cfg.w_high, cfg.w_low)
    if hp is None:
        hp = hparams_for(cfg, frames.shape[2])
    hp.use_audio = cfg.mode != "expr_only_l2"
    hp.latent = cfg.latent

    torch.manual_seed(cfg.seed)
    model = LatentModel(hp)
    model.encoder.expression.fit_normalization(frames)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    N, T = frames.shape[:2]
    L = min(cfg.crop_frames or T, T)
    bs = min(cfg.batch_size, N)

    def window(data, rows, starts):
        return torch.stack([data[r, s:s + L] for r, s in zip(rows, starts)])

    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(N, size=bs, replace=False)
        other_x = rng.integers(0, N, size=bs)
        other_a = rng.integers(0, N, size=bs)
        starts = rng.integers(0, T - L + 1, size=(3, bs))
        x = window(frames, idx, starts[0])
        a = window(feats_cf, idx, starts[0]).transpose(-1, -2)
        x_other = window(frames, other_x, starts[1])
        a_other = window(feats_cf, other_a, starts[2]).transpose(-1, -2)
        tau = hp.temperature(step)
        try:
            loss, parts = training_loss(model, cfg, masks, x, a, templates[idx], x_other, a_other,
                                        tau=tau, generator=gen, mode=cfg.sample_mode)
        except NonFiniteError as e:
            raise TrainingDiverged(f"{e} at step {step}") from e
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            raise TrainingDiverged(f"non-finite parameters after step {step}")
        losses.append(loss.item())
        line = f"{step} loss={loss.item():.6f} " + " ".join(f"{k}={v:.6f}" for k, v in parts.items())
        if log_file is not None:
            log_file.write(line + "\n")
        if cfg.log_every and step % cfg.log_every == 0:
            log.info(line)
        if callback is not None:
            callback(step, model)
    model.eval()
    return TrainResult(model, losses, cfg)


@torch.no_grad()
def reconstruction_error(model, samples):
    """Mean per-vertex Euclidean error (mm) of same-person reconstructions.

    ``model`` needs a ``reconstruct(template, frames, feats)`` method working
    on batched tensors.
    """
    errors = []
    for s in samples:
        x = torch.as_tensor(s.sequence.frames, dtype=torch.float32)[None]
        a = torch.as_tensor(s.featurize(), dtype=torch.float32)[None]
        h = torch.as_tensor(s.template.vertices, dtype=torch.float32)[None]
        pred = model.reconstruct(h, x, a)
        errors.append(torch.linalg.norm(pred - x, dim=-1).mean().item())
    return float(np.mean(errors))
