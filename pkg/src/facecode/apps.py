"""End-user pipelines: audio-driven animation, re-targeting and dubbing.

All three are stateless given a trained latent model (and a prior for
``animate``); inputs are never modified.
"""
import logging
import warnings

import numpy as np
import torch

from .audiofeat import mel_spectrogram, num_visual_frames
from .encoder import ShapeError
from .geometry import MeshSequence, TemplateMesh
from .prior import sample_latent

log = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


def _check_template(model, template):
    V = model.hp.num_vertices
    if template.num_vertices != V:
        raise ShapeError(f"template {template.identity_id!r} has V={template.num_vertices}, model expects V={V}")


def _check_prior(model, prior):
    hp, pp = model.hp, prior.pp
    if hp.latent != pp.latent:
        raise CheckpointMismatch(f"latent model is {hp.latent} but prior is {pp.latent}")
    if hp.latent == "categorical" and (hp.num_heads, hp.num_classes) != (pp.num_heads, pp.num_classes):
        raise CheckpointMismatch(f"latent model has (H, C)=({hp.num_heads}, {hp.num_classes}), "
                                 f"prior has ({pp.num_heads}, {pp.num_classes})")
    if hp.latent == "continuous" and hp.continuous_dim != pp.continuous_dim:
        raise CheckpointMismatch("latent model and prior disagree on the continuous width")


def _template_tensor(template):
    return torch.as_tensor(np.array(template.vertices, dtype=np.float32))[None]


def _features(waveform, num_frames=None):
    return torch.as_tensor(mel_spectrogram(np.asarray(waveform), num_frames=num_frames))[None]


@torch.no_grad()
def decode_code(model, template, code, fps=30.0):
    """Decode a LatentCode, a (T, H, C) soft code or a (T, D) continuous code."""
    _check_template(model, template)
    soft = getattr(code, "soft", code)
    soft = torch.as_tensor(np.asarray(soft, dtype=np.float32))[None]
    out = model.decode(_template_tensor(template), soft)[0].numpy()
    return MeshSequence(out.astype(np.float32), fps=fps)


@torch.no_grad()
def animate(model, prior, template, waveform, seed=0, temperature=1.0, return_code=False):
    """Speech + neutral template -> mesh sequence, sampling codes from the prior.

    Output length is the number of 30 fps frames the waveform covers.
    """
    _check_prior(model, prior)
    _check_template(model, template)
    feats = _features(waveform)
    code = sample_latent(prior, feats[0].numpy(), seed=seed, temperature=temperature)
    seq = decode_code(model, template, code)
    log.info("animated %d frames for %s (seed %d)", seq.num_frames, template.identity_id, seed)
    return (seq, code) if return_code else seq


@torch.no_grad()
def encode_sequence(model, seq, waveform):
    """Deterministic (argmax) code for a mesh sequence and its audio."""
    if seq.frames.shape[1] != model.hp.num_vertices:
        raise ShapeError(f"sequence has V={seq.frames.shape[1]}, model expects V={model.hp.num_vertices}")
    frames = torch.as_tensor(np.array(seq.frames, dtype=np.float32))[None]
    feats = _features(waveform, num_frames=seq.num_frames)
    return model.encode(frames, feats, "argmax")[0]


@torch.no_grad()
def retarget(model, src, src_wave, target):
    """Transfer a source performance onto another identity's template."""
    _check_template(model, target)
    code = encode_sequence(model, src, src_wave)
    return decode_code(model, target, code.numpy(), fps=src.fps)


@torch.no_grad()
def dub(model, original, new_wave, template):
    """Re-synthesize lips from ``new_wave`` while keeping the original upper face.

    When the new audio covers a different number of frames, both are cropped
    to the shorter length with a warning.
    """
    _check_template(model, template)
    T_audio = num_visual_frames(len(new_wave), fps=original.fps)
    T = min(original.num_frames, T_audio)
    if T != original.num_frames or T != T_audio:
        msg = f"dub: sequence has {original.num_frames} frames, audio {T_audio}; cropping to {T}"
        warnings.warn(msg)
        log.warning(msg)
        original = MeshSequence(original.frames[:T], fps=original.fps)
    return retarget(model, original, new_wave, template)
