"""Flat ``key = value`` run configuration with dotted keys.

Every tunable default of the toolkit has an explicit key here, so
``dump-config`` prints the complete set of choices a run depends on.
Unknown keys are rejected. Keys under ``audio.`` are fixed by the feature
contract and may not be changed.
"""
from . import audiofeat, prior, synthdata

DEFAULTS = {
    # vertex masks
    "mask.w_high": 1.0,
    "mask.w_low": 0.1,
    # latent space and networks
    "latent.num_classes": 32,
    "latent.num_heads": 8,
    "latent.d_audio": 128,
    "latent.d_expr": 128,
    "latent.d_fuse": 128,
    "latent.audio_channels": 32,
    "latent.audio_kernel": 3,
    "latent.audio_layers": 4,
    "latent.expr_hidden": 256,
    "latent.code_embed": 16,
    "latent.dec_widths": (256, 128, 64),
    "latent.dec_lstm": 128,
    "latent.continuous_dim": 32,
    "gumbel.tau_start": 2.0,
    "gumbel.tau_end": 0.5,
    "gumbel.anneal_steps": 25000,
    # latent-model training
    "train.mode": "expr_audio_xmod",
    "train.latent": "categorical",
    "train.lr": 1e-4,
    "train.steps": 25000,
    "train.batch_size": 16,
    "train.seed": 0,
    "train.grad_clip": 1.0,
    "train.kl_weight": 1e-3,
    "train.crop_frames": 32,
    "train.sample_mode": "sample_soft",
    # autoregressive prior
    "prior.width": 32,
    "prior.kernel": 3,
    "prior.dilations": (1, 2, 4, 8),
    "prior.d_audio": 128,
    "prior.audio_channels": 32,
    "prior.lr": 1e-3,
    "prior.steps": 5000,
    "prior.batch_size": 16,
    "prior.seed": 0,
    "prior.val_fraction": 0.1,
    "prior.eval_every": 25,
    "prior.temperature": 1.0,
    "prior.perplexity_eps": prior.PP_EPS,
    # synthetic data
    "synth.lip": 24,
    "synth.mouth": 36,
    "synth.upper_face": 120,
    "synth.eyelid": 20,
    "synth.other": 40,
    "synth.fps": 30,
    "synth.blink_rate": 0.3,
    "synth.blink_duration_ms": 150.0,
    "synth.brow_raise_probability": 0.5,
    "synth.smooth_ms": synthdata.SMOOTH_MS,
    "synth.lip_max_mm": synthdata.LIP_MAX_MM,
    "synth.blink_depth_mm": synthdata.BLINK_DEPTH_MM,
    "synth.brow_raise_mm": synthdata.BROW_RAISE_MM,
    "data.seed": 0,
    "data.train_identities": 8,
    "data.val_identities": 0,
    "data.test_identities": 2,
    "data.sequences_per_identity": 20,
    "data.num_frames": 64,
    # feature extraction (fixed)
    "audio.sample_rate": audiofeat.SAMPLE_RATE,
    "audio.window_before_ms": 500,
    "audio.window_after_ms": 100,
    "audio.hop": audiofeat.HOP,
    "audio.win": audiofeat.WIN,
    "audio.n_fft": audiofeat.N_FFT,
    "audio.n_mels": audiofeat.N_MELS,
    "audio.f_max": audiofeat.F_MAX,
    "audio.log_floor": audiofeat.LOG_FLOOR,
}

FIXED_PREFIXES = ("audio.", "synth.smooth_ms", "synth.lip_max_mm", "synth.blink_depth_mm",
                  "synth.brow_raise_mm", "prior.perplexity_eps")


class ConfigError(ValueError):
    pass


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


class RunConfig(dict):
    """Mapping of every config key to its value, defaults filled in."""

    def __init__(self, overrides=None):
        super().__init__(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse(key, value)
        if key.startswith(FIXED_PREFIXES) and value != DEFAULTS[key]:
            raise ConfigError(f"{key} is fixed at {DEFAULTS[key]}")
        self[key] = value

    @classmethod
    def from_text(cls, text, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_text(f.read(), str(path))

    def dump(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def hyperparams(self, num_vertices, mode=None, latent=None):
        from .encoder import HyperParams

        lat = self.section("latent")
        mode = mode or self["train.mode"]
        return HyperParams(
            num_vertices=num_vertices, use_audio=mode != "expr_only_l2",
            latent=latent or self["train.latent"],
            tau_start=self["gumbel.tau_start"], tau_end=self["gumbel.tau_end"],
            tau_anneal_steps=self["gumbel.anneal_steps"], **lat)

    def train_config(self, **overrides):
        from .training import TrainConfig

        t = self.section("train")
        t.update(w_high=self["mask.w_high"], w_low=self["mask.w_low"])
        t.update(overrides)
        return TrainConfig(**t)

    def prior_params(self, num_heads, num_classes, latent="categorical", continuous_dim=32):
        return prior.PriorParams(
            num_heads=num_heads, num_classes=num_classes, width=self["prior.width"],
            kernel=self["prior.kernel"], dilations=self["prior.dilations"],
            d_audio=self["prior.d_audio"], audio_channels=self["prior.audio_channels"],
            latent=latent, continuous_dim=continuous_dim)

    def prior_train_config(self, **overrides):
        cfg = prior.PriorTrainConfig(lr=self["prior.lr"], steps=self["prior.steps"],
                                     batch_size=self["prior.batch_size"], seed=self["prior.seed"],
                                     val_fraction=self["prior.val_fraction"],
                                     eval_every=self["prior.eval_every"])
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def synth_config(self):
        s = self.section("synth")
        return synthdata.SynthConfig(
            lip=s["lip"], mouth=s["mouth"], upper_face=s["upper_face"], eyelid=s["eyelid"],
            other=s["other"], fps=s["fps"], blink_rate=s["blink_rate"],
            blink_duration_ms=s["blink_duration_ms"],
            brow_raise_probability=s["brow_raise_probability"], seed=self["data.seed"])

    def corpus_spec(self):
        from .dataset import CorpusSpec

        d = self.section("data")
        return CorpusSpec(seed=d["seed"], train_identities=d["train_identities"],
                          val_identities=d["val_identities"], test_identities=d["test_identities"],
                          sequences_per_identity=d["sequences_per_identity"],
                          num_frames=d["num_frames"])
