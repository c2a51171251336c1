"""Versioned checkpoint container for latent model and prior parameters.

Layout (little-endian):

    "FCKP" u32 version u32 header_len  header (canonical JSON: hparams, provenance)
    u32 num_blobs
    per blob: u16 name_len, name (utf-8), u32 ndim, u32 dims[ndim], f32 payload
"""
from dataclasses import dataclass, field
import json
import struct

import numpy as np
import torch

from .encoder import HyperParams
from .formats import FormatError, _read, atomic_write

MAGIC = b"FCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Checkpoint:
    hparams: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_bytes(self):
        header = _canonical_json({"hparams": self.hparams, "provenance": self.provenance})
        parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
                 struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        if data[:4] != MAGIC:
            raise FormatError(f"{source}: not a checkpoint")
        try:
            ckpt = cls._parse(data, source)
        except (struct.error, ValueError, KeyError) as e:
            if isinstance(e, (FormatError, CheckpointError)):
                raise
            raise FormatError(f"{source}: corrupt checkpoint ({e})") from None
        ckpt.validate()
        return ckpt

    @classmethod
    def _parse(cls, data, source):
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + nlen].decode()
            off += 2 + nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(data):
                raise FormatError(f"{source}: truncated blob {name!r}")
            tensors[name] = np.frombuffer(data, "<f4", n, off).reshape(shape).copy()
            off += 4 * n
        if off != len(data):
            raise FormatError(f"{source}: trailing bytes")
        return cls(header["hparams"], tensors, header["provenance"])

    def save(self, path):
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(_read(path), str(path))

    def merged(self, other):
        return Checkpoint({**self.hparams, **other.hparams}, {**self.tensors, **other.tensors},
                          {**self.provenance, **other.provenance})

    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith(p)}

    @property
    def has_latent(self):
        return "latent" in self.hparams

    @property
    def has_prior(self):
        return "prior" in self.hparams

    def validate(self):
        """Enforce C, H, V consistency between hyperparameters and blobs."""
        lat = self.hparams.get("latent")
        if lat is not None:
            V = lat["num_vertices"]
            bias = self.tensors.get("latent.decoder.up3.bias")
            if bias is not None and bias.shape != (V * 3,):
                raise CheckpointError(f"decoder output {bias.shape} does not match V={V}")
            emb = self.tensors.get("latent.decoder.code_embed")
            if emb is not None and emb.shape[:2] != (lat["num_heads"], lat["num_classes"]):
                raise CheckpointError(f"code embedding {emb.shape} does not match "
                                      f"H={lat['num_heads']}, C={lat['num_classes']}")
        pri = self.hparams.get("prior")
        if pri is not None:
            emb = self.tensors.get("prior.embed")
            if emb is not None and emb.shape[:2] != (pri["num_heads"], pri["num_classes"]):
                raise CheckpointError(f"prior embedding {emb.shape} does not match "
                                      f"H={pri['num_heads']}, C={pri['num_classes']}")
            if lat is not None and pri["latent"] == lat["latent"] == "categorical" and (
                    pri["num_heads"], pri["num_classes"]) != (lat["num_heads"], lat["num_classes"]):
                raise CheckpointError("prior and latent model disagree on (H, C)")


def _tensors(prefix, module):
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def latent_checkpoint(model, cfg=None, masks=(1.0, 0.1)):
    prov = {}
    if cfg is not None:
        prov = {"latent.seed": cfg.seed, "latent.steps": cfg.steps, "latent.mode": cfg.mode,
                "latent.kind": cfg.latent}
        masks = (cfg.w_high, cfg.w_low)
    hp = {"latent": model.hp.to_dict(), "masks": {"w_high": masks[0], "w_low": masks[1]}}
    return Checkpoint(hp, _tensors("latent", model), prov)


def prior_checkpoint(prior, cfg=None):
    prov = {"prior.seed": cfg.seed, "prior.steps": cfg.steps} if cfg is not None else {}
    return Checkpoint({"prior": prior.pp.to_dict()}, _tensors("prior", prior), prov)


def load_latent_model(ckpt):
    from .training import LatentModel

    if not ckpt.has_latent:
        raise CheckpointError("checkpoint has no latent model")
    model = LatentModel(HyperParams.from_dict(ckpt.hparams["latent"]))
    model.load_state_dict(ckpt.section("latent"))
    model.eval()
    return model


def load_prior(ckpt):
    from .prior import PriorModel, PriorParams

    if not ckpt.has_prior:
        raise CheckpointError("checkpoint has no prior")
    prior = PriorModel(PriorParams.from_dict(ckpt.hparams["prior"]))
    prior.load_state_dict(ckpt.section("prior"))
    prior.eval()
    return prior
