"""Command-line entry point: ``facecode <subcommand> [flags]``.

Every subcommand reads the run configuration (``--config`` file plus
``--set key=value`` overrides) and its own flags. Exit status is 0 on
success, 2 on usage errors and 1 on I/O or data failures.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import formats
from .checkpoint import Checkpoint, CheckpointError, latent_checkpoint, load_latent_model, load_prior, prior_checkpoint
from .config import ConfigError, RunConfig

log = logging.getLogger("facecode")


class CliError(Exception):
    pass


def _config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def _override(cfg, args, mapping):
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, value)


# ---------------------------------------------------------------- subcommands

def cmd_synth_data(args, cfg):
    from .dataset import make_corpus, write_corpus

    _override(cfg, args, {"seed": "data.seed"})
    corpus = make_corpus(cfg.corpus_spec(), cfg.synth_config(), featurize=False)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sequences for {len(corpus.identities())} identities to {args.out}")


def cmd_featurize(args, cfg):
    from .audiofeat import mel_spectrogram
    from .dataset import read_manifest

    if args.audio:
        if not args.out:
            raise CliError("featurize --audio needs --out")
        wav, rate = formats.read_wav(args.audio)
        formats.write_mels(args.out, mel_spectrogram(wav, sample_rate=rate))
        print(f"wrote {args.out}")
        return
    if not args.data:
        raise CliError("featurize needs --data or --audio")
    rows = read_manifest(args.data)
    for identity, _, name in rows:
        base = os.path.join(args.data, identity, name)
        wav, rate = formats.read_wav(base + ".wav")
        T = formats.read_mshs(base + ".mshs").num_frames
        formats.write_mels(base + ".mels", mel_spectrogram(wav, num_frames=T, sample_rate=rate))
    print(f"featurized {len(rows)} sequences")


def cmd_train_latent(args, cfg):
    from .dataset import load_corpus
    from .training import train_latent_model

    _override(cfg, args, {"mode": "train.mode", "latent": "train.latent", "steps": "train.steps",
                          "seed": "train.seed", "lr": "train.lr", "batch_size": "train.batch_size"})
    corpus = load_corpus(args.data, split="train")
    tcfg = cfg.train_config()
    hp = cfg.hyperparams(corpus[0].template.num_vertices, mode=tcfg.mode, latent=tcfg.latent)
    with _log_file(args.log) as lf:
        res = train_latent_model(tcfg, corpus, hp, log_file=lf)
    res.checkpoint().save(args.out)
    print(f"final loss {res.losses[-1]:.6f}; wrote {args.out}")


def cmd_train_prior(args, cfg):
    from .dataset import load_corpus
    from .evalkit import corpus_codes
    from .prior import train_prior

    _override(cfg, args, {"steps": "prior.steps", "seed": "prior.seed", "lr": "prior.lr"})
    ckpt = Checkpoint.load(args.checkpoint)
    model = load_latent_model(ckpt)
    corpus = load_corpus(args.data, split="train")
    codes = corpus_codes(model, corpus)
    feats = np.stack([s.features for s in corpus])
    hp = model.hp
    pp = cfg.prior_params(hp.num_heads, hp.num_classes, hp.latent, hp.continuous_dim)
    pcfg = cfg.prior_train_config()
    with _log_file(args.log) as lf:
        res = train_prior(codes, feats, pcfg, pp, log_file=lf)
    merged = Checkpoint(ckpt.hparams, {k: v for k, v in ckpt.tensors.items() if k.startswith("latent.")},
                        {k: v for k, v in ckpt.provenance.items() if k.startswith("latent.")})
    merged = merged.merged(prior_checkpoint(res.model, pcfg))
    merged.save(args.out)
    kept = f"; kept step {res.best_step} (validation {min(v for _, v in res.val_losses):.6f})" \
        if res.best_step is not None else ""
    print(f"final cross-entropy {res.losses[-1]:.6f}{kept}; wrote {args.out}")


def _models(path, need_prior=False):
    ckpt = Checkpoint.load(path)
    model = load_latent_model(ckpt)
    prior = load_prior(ckpt) if need_prior else None
    return model, prior


def _write_sequence(seq, args):
    formats.write_mshs(args.out, seq.frames)
    if getattr(args, "obj_dir", None):
        formats.write_obj_frames(args.obj_dir, seq)
    print(f"wrote {seq.num_frames} frames to {args.out}")


def _read_audio(path):
    from .audiofeat import SAMPLE_RATE

    wav, rate = formats.read_wav(path)
    if rate != SAMPLE_RATE:
        raise formats.FormatError(f"{path}: expected {SAMPLE_RATE} Hz audio, got {rate} Hz")
    return wav


def cmd_animate(args, cfg):
    from .apps import animate

    model, prior = _models(args.checkpoint, need_prior=True)
    temperature = args.temperature if args.temperature is not None else cfg["prior.temperature"]
    seq = animate(model, prior, formats.read_msht(args.template), _read_audio(args.audio),
                  seed=args.seed, temperature=temperature)
    _write_sequence(seq, args)


def cmd_retarget(args, cfg):
    from .apps import retarget

    model, _ = _models(args.checkpoint)
    seq = retarget(model, formats.read_mshs(args.source), _read_audio(args.source_audio),
                   formats.read_msht(args.target))
    _write_sequence(seq, args)


def cmd_dub(args, cfg):
    from .apps import dub

    model, _ = _models(args.checkpoint)
    seq = dub(model, formats.read_mshs(args.original), _read_audio(args.audio),
              formats.read_msht(args.template))
    _write_sequence(seq, args)


def _lip_mask(args, cfg, V):
    from .geometry import build_masks
    from .synthdata import SynthConfig, face_layout

    if args.template:
        labels = formats.read_msht(args.template).region_labels
    else:
        labels = face_layout(SynthConfig()).labels
        if len(labels) != V:
            raise CliError(f"meshes have V={V}; pass --template to supply region labels")
    return build_masks(labels, cfg["mask.w_high"], cfg["mask.w_low"])[3]


def cmd_eval(args, cfg):
    from .evalkit import lip_error, write_reports

    pred, gt = formats.read_mshs(args.pred), formats.read_mshs(args.gt)
    err = lip_error(pred, gt, _lip_mask(args, cfg, gt.num_vertices))
    mean_err = float(np.linalg.norm(pred.frames - gt.frames, axis=-1).mean())
    metrics = {"lip_error_mm": err, "mean_vertex_error_mm": mean_err, "frames": gt.num_frames}
    print(f"lip error: {err:.3f} mm")
    print(f"mean vertex error: {mean_err:.3f} mm")
    if args.report:
        write_reports(args.report, metrics, title="evaluation")


def cmd_analyze_latent(args, cfg):
    from .dataset import load_corpus
    from .evalkit import export_influence, latent_cluster_analysis, modality_influence_map, region_means, write_reports

    model, _ = _models(args.checkpoint)
    corpus = load_corpus(args.data, split=args.split)
    res = latent_cluster_analysis(model, corpus, n_samples=args.n_samples, seed=args.seed)
    audio_inf, expr_inf = modality_influence_map(model, corpus, max_pairs=args.n_samples)
    labels = corpus[0].template.region_labels
    a, e = region_means(audio_inf, labels), region_means(expr_inf, labels)
    os.makedirs(args.out, exist_ok=True)
    export_influence(args.out, audio_inf, expr_inf)
    np.savetxt(os.path.join(args.out, "projections.txt"),
               np.column_stack([res.projections, res.tags]), fmt="%.6f %.6f %d",
               header="pc1 pc2 tag(0=varied audio,1=varied expression)")
    metrics = {"cluster_accuracy": res.accuracy,
               "audio_influence_lip": a["lip"], "audio_influence_eyelid": a["eyelid"],
               "expression_influence_lip": e["lip"], "expression_influence_eyelid": e["eyelid"]}
    write_reports(os.path.join(args.out, "latent_report"), metrics, title="latent analysis")
    print(f"cluster accuracy: {res.accuracy:.3f}")


def cmd_dump_config(args, cfg):
    sys.stdout.write(cfg.dump())


class _log_file:
    def __init__(self, path):
        self.path, self.f = path, None

    def __enter__(self):
        if self.path:
            self.f = open(self.path, "w")
        return self.f

    def __exit__(self, *exc):
        if self.f:
            self.f.close()


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="facecode", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth-data", cmd_synth_data, "generate the synthetic dataset tree")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("featurize", cmd_featurize, "compute log-Mel features")
    sp.add_argument("--data")
    sp.add_argument("--audio")
    sp.add_argument("--out")

    sp = add("train-latent", cmd_train_latent, "train the encoder and decoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("expr_only_l2", "expr_audio_l2", "expr_audio_xmod"))
    sp.add_argument("--latent", choices=("categorical", "continuous"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--log")

    sp = add("train-prior", cmd_train_prior, "train the autoregressive prior on encoded codes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--log")

    sp = add("animate", cmd_animate, "animate a template from speech")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj-dir")

    sp = add("retarget", cmd_retarget, "transfer a performance to another identity")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--source-audio", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj-dir")

    sp = add("dub", cmd_dub, "re-synthesize lip motion from new audio")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--original", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--template", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj-dir")

    sp = add("eval", cmd_eval, "lip error of a prediction against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--template", help="template supplying region labels")
    sp.add_argument("--report", help="write <prefix>.txt and <prefix>.kv")

    sp = add("analyze-latent", cmd_analyze_latent, "cluster separation and modality influence maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--n-samples", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    add("dump-config", cmd_dump_config, "print every configuration key and value")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors (2) and --help (0)
        return e.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ConfigError, CliError) as e:
        print(f"facecode {args.command}: {e}", file=sys.stderr)
        return 2
    except (OSError, formats.FormatError, CheckpointError, ValueError) as e:
        print(f"facecode {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
