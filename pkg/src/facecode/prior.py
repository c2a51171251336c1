"""Audio-conditioned autoregressive prior over categorical latent codes.

Positions (t, h) are ordered raster-style with the head index fastest. The
model is a stack of four masked temporal convolutions over a (time, head)
grid. Past time taps see every head; the current-time tap sees only earlier
heads in the first layer and earlier-or-same heads in later layers, so the
prediction for (t, h) reads c[<t, :], c[t, <h] and audio frames <= t.
"""
import copy
from dataclasses import asdict, dataclass, field
import logging
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoder import AudioEncoder, HyperParams, LatentCode, ShapeError, gumbel_noise

log = logging.getLogger(__name__)

PP_EPS = 1e-12


class PriorError(ValueError):
    pass


@dataclass
class PriorParams:
    num_heads: int = 8
    num_classes: int = 32
    width: int = 32
    kernel: int = 3
    dilations: tuple = (1, 2, 4, 8)
    d_audio: int = 128
    audio_channels: int = 32
    audio_kernel: int = 3
    audio_layers: int = 4
    latent: str = "categorical"
    continuous_dim: int = 32

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.latent not in ("categorical", "continuous"):
            raise ValueError(f"unknown latent type {self.latent!r}")

    @property
    def grid_heads(self):
        """Heads on the autoregressive grid; the continuous latent uses one."""
        return self.num_heads if self.latent == "categorical" else 1

    def receptive_field(self):
        return 1 + (self.kernel - 1) * sum(self.dilations)

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def visible_context(t, h, T, H):
    """Positions (t', h') the prediction at (t, h) may read; 1-based like the math."""
    if not (1 <= t <= T and 1 <= h <= H):
        raise PriorError(f"position ({t}, {h}) outside a {T}x{H} grid")
    past = {(tp, hp) for tp in range(1, t) for hp in range(1, H + 1)}
    return past | {(t, hp) for hp in range(1, h)}


class MaskedTemporalConv(nn.Module):
    """Dilated causal convolution over time with head-masked current tap.

    Input and output are (B, T, H * width). ``strict`` masks the current
    position itself (first layer).
    """

    def __init__(self, heads, width_in, width_out, kernel, dilation, strict):
        super().__init__()
        self.heads, self.kernel, self.dilation = heads, kernel, dilation
        self.width_in, self.width_out = width_in, width_out
        fan_in = kernel * heads * width_in
        self.weight = nn.Parameter(torch.randn(kernel, heads * width_in, heads * width_out)
                                   / math.sqrt(fan_in))
        self.bias = nn.Parameter(torch.zeros(heads * width_out))
        h_in = torch.arange(heads).repeat_interleave(width_in)
        h_out = torch.arange(heads).repeat_interleave(width_out)
        allowed = h_in[:, None] < h_out[None] if strict else h_in[:, None] <= h_out[None]
        mask = torch.ones(kernel, heads * width_in, heads * width_out)
        mask[-1] = allowed.float()
        self.register_buffer("mask", mask)

    def masked_weight(self):
        return (self.weight * self.mask).reshape(-1, self.weight.shape[-1])

    def taps(self, x, t=None):
        """Stack the kernel taps; all times if ``t`` is None, else only time ``t``."""
        pad = (self.kernel - 1) * self.dilation
        xp = F.pad(x, (0, 0, pad, 0))
        T = x.shape[1]
        if t is None:
            return torch.cat([xp[:, j * self.dilation: j * self.dilation + T]
                              for j in range(self.kernel)], dim=-1)
        return torch.cat([xp[:, t + j * self.dilation] for j in range(self.kernel)], dim=-1)

    def forward(self, x, t=None):
        return self.taps(x, t) @ self.masked_weight() + self.bias


class PriorModel(nn.Module):
    def __init__(self, pp):
        super().__init__()
        self.pp = pp
        G, W = pp.grid_heads, pp.width
        if pp.latent == "categorical":
            self.embed = nn.Parameter(torch.randn(G, pp.num_classes, W) * 0.5)
            out_dim = pp.num_classes
        else:
            self.embed_in = nn.Linear(pp.continuous_dim, W)
            out_dim = 2 * pp.continuous_dim
        self.audio = AudioEncoder(HyperParams(
            d_audio=pp.d_audio, audio_channels=pp.audio_channels,
            audio_kernel=pp.audio_kernel, audio_layers=pp.audio_layers))
        self.layers = nn.ModuleList(
            MaskedTemporalConv(G, W, W, pp.kernel, d, strict=(i == 0))
            for i, d in enumerate(pp.dilations))
        self.cond = nn.ModuleList(nn.Linear(pp.d_audio, G * W) for _ in pp.dilations)
        self.out_weight = nn.Parameter(torch.randn(G, W, out_dim) / math.sqrt(W))
        self.out_bias = nn.Parameter(torch.zeros(G, out_dim))

    def embed_codes(self, codes):
        """(B, T, H, C) soft one-hot or (B, T, D) continuous -> (B, T, G * W)."""
        if self.pp.latent == "categorical":
            return torch.einsum("bthc,hcw->bthw", codes, self.embed).flatten(2)
        return self.embed_in(codes)

    def audio_conditioning(self, feats):
        a = self.audio(feats)
        return [c(a) for c in self.cond]

    def _head_out(self, h):
        G = self.pp.grid_heads
        h = h.reshape(*h.shape[:-1], G, self.pp.width)
        return torch.einsum("...gw,gwo->...go", h, self.out_weight) + self.out_bias

    def forward(self, codes, feats):
        """Teacher-forced outputs for every position in one pass.

        Categorical: logits (B, T, H, C). Continuous: (mean, logvar), each (B, T, D).
        """
        if codes.shape[:2] != feats.shape[:2]:
            raise ShapeError(f"codes {tuple(codes.shape)} and features {tuple(feats.shape)} disagree on (B, T)")
        self._check_codes(codes)
        h = self.embed_codes(codes)
        for i, (layer, cond) in enumerate(zip(self.layers, self.audio_conditioning(feats))):
            y = F.gelu(layer(h) + cond)
            h = y if i == 0 else h + y
        out = self._head_out(h)
        if self.pp.latent == "continuous":
            mean, logvar = out[..., 0, :].chunk(2, dim=-1)
            return mean, logvar.clamp(-12.0, 6.0)
        return out

    def _check_codes(self, codes):
        pp = self.pp
        if pp.latent == "categorical":
            if codes.shape[-2:] != (pp.num_heads, pp.num_classes):
                raise ShapeError(f"codes {tuple(codes.shape)} do not match H={pp.num_heads}, C={pp.num_classes}")
        elif codes.shape[-1] != pp.continuous_dim:
            raise ShapeError(f"continuous codes have width {codes.shape[-1]}, expected {pp.continuous_dim}")

    def column(self, inputs, conds, t):
        """Recompute every layer at time ``t`` only, updating cached layer inputs.

        ``inputs`` is a list of (B, T, G * W) tensors: the embedded codes and the
        input of each deeper layer. Returns the head outputs at time ``t``.
        """
        h = None
        for i, (layer, cond) in enumerate(zip(self.layers, conds)):
            y = F.gelu(layer(inputs[i], t) + cond[:, t])
            h = y if i == 0 else inputs[i][:, t] + y
            if i + 1 < len(inputs):
                inputs[i + 1][:, t] = h
        return self._head_out(h)


def prior_logits(prior, codes, feats):
    """Teacher-forced logits (T, H, C) for one code sequence.

    ``codes`` is a LatentCode or a (T, H) label array; ``feats`` is (T, 60, 80).
    """
    labels = codes.labels if isinstance(codes, LatentCode) else np.asarray(codes)
    onehot = F.one_hot(torch.as_tensor(labels, dtype=torch.long), prior.pp.num_classes)
    feats = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    dtype = next(prior.parameters()).dtype
    with torch.no_grad():
        return prior(onehot[None].to(dtype), feats[None].to(dtype))[0]


@torch.no_grad()
def sample_latent(prior, feats, seed=0, temperature=1.0, return_logits=False):
    """Ancestral sampling in raster order (head fastest), one Gumbel-max draw per position.

    ``feats`` is (T, 60, 80) or batched (B, T, 60, 80). Returns a LatentCode
    (or a list for batched input); the continuous prior returns z arrays.
    """
    if temperature <= 0:
        raise PriorError("sampling temperature must be positive")
    pp = prior.pp
    dtype = next(prior.parameters()).dtype
    feats = torch.as_tensor(np.asarray(feats)).to(dtype)
    batched = feats.dim() == 4
    if not batched:
        feats = feats[None]
    B, T = feats.shape[:2]
    gen = torch.Generator().manual_seed(int(seed))
    G, W = pp.grid_heads, pp.width
    conds = prior.audio_conditioning(feats)
    inputs = [torch.zeros(B, T, G * W, dtype=dtype) for _ in prior.layers]

    if pp.latent == "continuous":
        z = torch.zeros(B, T, pp.continuous_dim, dtype=dtype)
        for t in range(T):
            out = prior.column(inputs, conds, t)[:, 0]
            mean, logvar = out.chunk(2, dim=-1)
            std = torch.exp(0.5 * logvar.clamp(-12.0, 6.0)) * temperature
            z[:, t] = mean + std * torch.randn(mean.shape, generator=gen, dtype=dtype)
            inputs[0][:, t] = prior.embed_in(z[:, t])
        out = [zi.numpy() for zi in z]
        return out if batched else out[0]

    labels = torch.zeros(B, T, G, dtype=torch.long)
    step_logits = torch.zeros(B, T, G, pp.num_classes, dtype=dtype)
    for t in range(T):
        for h in range(G):
            logits = prior.column(inputs, conds, t)[:, h]
            step_logits[:, t, h] = logits
            noise = gumbel_noise(logits.shape, gen, dtype)
            c = (logits / temperature + noise).argmax(-1)
            labels[:, t, h] = c
            emb = prior.embed[h, c]  # (B, W)
            inputs[0][:, t, h * W:(h + 1) * W] = emb
        prior.column(inputs, conds, t)  # settle deeper-layer inputs at t
    codes = [LatentCode.from_labels(l.numpy(), pp.num_classes) for l in labels]
    if return_logits:
        logits_np = [l.numpy() for l in step_logits]
        return (codes, logits_np) if batched else (codes[0], logits_np[0])
    return codes if batched else codes[0]


@dataclass
class Perplexity:
    value: float
    clamped: int = 0

    def __float__(self):
        return self.value


@torch.no_grad()
def perplexity(prior, codes, feats):
    """exp of mean per-position cross-entropy over one or many code sequences.

    ``codes`` is a LatentCode, a (T, H) array or an (N, T, H) array with
    matching ``feats``. Probabilities below ``PP_EPS`` are clamped and counted.
    """
    labels = codes.labels if isinstance(codes, LatentCode) else np.asarray(codes)
    feats = np.asarray(feats)
    if labels.ndim == 2:
        labels, feats = labels[None], feats[None]
    total, count, clamped = 0.0, 0, 0
    for lab, f in zip(labels, feats):
        logp = torch.log_softmax(prior_logits(prior, lab, f).double(), dim=-1)
        picked = logp.gather(-1, torch.as_tensor(lab)[..., None]).squeeze(-1)
        floor = math.log(PP_EPS)
        clamped += int((picked < floor).sum())
        total += -picked.clamp_min(floor).sum().item()
        count += picked.numel()
    return Perplexity(math.exp(total / count), clamped)


@dataclass
class PriorTrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 100
    val_fraction: float = 0.0  # >0 holds out sequences and keeps the best-validation weights
    eval_every: int = 25


@dataclass
class PriorTrainResult:
    model: PriorModel
    losses: list = field(default_factory=list)
    config: PriorTrainConfig = None
    val_losses: list = field(default_factory=list)  # (step, loss) pairs
    best_step: int = None
    val_indices: np.ndarray = None


def _prior_inputs(pp, codes):
    if pp.latent == "categorical":
        return F.one_hot(torch.as_tensor(codes, dtype=torch.long), pp.num_classes).float()
    return torch.as_tensor(codes, dtype=torch.float32)


def prior_loss(prior, inputs, targets, feats):
    pp = prior.pp
    if pp.latent == "categorical":
        logits = prior(inputs, feats)
        return F.cross_entropy(logits.reshape(-1, pp.num_classes), targets.reshape(-1))
    mean, logvar = prior(inputs, feats)
    return 0.5 * (logvar + (targets - mean) ** 2 / logvar.exp() + math.log(2 * math.pi)).mean()


def train_prior(codes, feats, cfg=None, pp=None, log_file=None):
    """Teacher-forced training on codes from a frozen encoder.

    ``codes``: (N, T, H) labels (categorical) or (N, T, D) latents (continuous);
    ``feats``: (N, T, 60, 80). The categorical loss is mean cross-entropy over
    all positions; the continuous one is the Gaussian negative log-likelihood.
    """
    cfg = cfg or PriorTrainConfig()
    codes = np.asarray(codes)
    feats = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
    if codes.shape[:2] != tuple(feats.shape[:2]):
        raise ShapeError(f"codes {codes.shape} and features {tuple(feats.shape)} disagree on (N, T)")
    if pp is None:
        if np.issubdtype(codes.dtype, np.integer):
            pp = PriorParams(num_heads=codes.shape[2], num_classes=max(32, int(codes.max()) + 1))
        else:
            pp = PriorParams(latent="continuous", continuous_dim=codes.shape[2])
    torch.manual_seed(cfg.seed)
    prior = PriorModel(pp)
    inputs = _prior_inputs(pp, codes)
    targets = torch.as_tensor(codes)
    opt = torch.optim.Adam(prior.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = np.arange(len(codes))
    n_val = int(round(cfg.val_fraction * len(codes))) if cfg.val_fraction > 0 else 0
    if n_val:
        if n_val >= len(codes):
            raise ValueError(f"val_fraction {cfg.val_fraction} leaves no training sequences")
        order = rng.permutation(len(codes))
    val, train = order[:n_val], order[n_val:]
    N = len(train)
    bs = min(cfg.batch_size, N)
    losses, val_losses = [], []
    best, best_step = None, None

    def validate(step):
        nonlocal best, best_step
        prior.eval()
        with torch.no_grad():
            v = prior_loss(prior, inputs[val], targets[val], feats[val]).item()
        prior.train()
        val_losses.append((step, v))
        if best is None or v < best[0]:
            best = (v, copy.deepcopy(prior.state_dict()))
            best_step = step

    for step in range(cfg.steps):
        if n_val and step % cfg.eval_every == 0:
            validate(step)
        idx = train[rng.choice(N, size=bs, replace=False)]
        loss = prior_loss(prior, inputs[idx], targets[idx], feats[idx])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite prior loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(prior.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if log_file is not None:
            log_file.write(f"{step} ce={loss.item():.6f}\n")
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("prior step %d loss %.5f", step, loss.item())
    if n_val:
        validate(cfg.steps)
        prior.load_state_dict(best[1])
        log.info("prior keeps step %d weights, validation loss %.5f", best_step, best[0])
    prior.eval()
    return PriorTrainResult(prior, losses, cfg, val_losses, best_step, val)
