import os

import numpy as np
import pytest
import torch

from facecode import formats
from facecode.checkpoint import (Checkpoint, CheckpointError, latent_checkpoint, load_latent_model,
                                 load_prior, prior_checkpoint)
from facecode.config import DEFAULTS, ConfigError, RunConfig
from facecode.dataset import CorpusSpec, load_corpus, make_corpus, write_corpus
from facecode.formats import FormatError
from facecode.geometry import TemplateMesh
from facecode.prior import PriorModel, PriorParams
from facecode.synthdata import GroundTruthTracks, synth_identity
from facecode.training import LatentModel


def _roundtrip(tmp_path, name, write, read, value, to_bytes):
    path = tmp_path / name
    write(path, value)
    first = path.read_bytes()
    assert first == to_bytes(value)
    write(path, read(path))
    assert path.read_bytes() == first
    return read(path)


def test_mshs_roundtrip(tmp_path, rng):
    frames = rng.normal(size=(5, 7, 3)).astype(np.float32)
    seq = _roundtrip(tmp_path, "a.mshs", formats.write_mshs,
                     lambda p: formats.read_mshs(p).frames, frames, formats.mshs_bytes)
    np.testing.assert_array_equal(seq, frames)
    data = (tmp_path / "a.mshs").read_bytes()
    assert data[:4] == b"MSHS" and len(data) == 16 + 5 * 7 * 3 * 4


def test_msht_roundtrip(tmp_path):
    t = synth_identity(3)
    path = tmp_path / t.identity_id / "template.msht"
    formats.write_msht(path, t)
    back = formats.read_msht(path)
    assert back.identity_id == t.identity_id and back.region_labels == t.region_labels
    np.testing.assert_array_equal(back.vertices, t.vertices.astype(np.float32))
    formats.write_msht(path, back)
    assert path.read_bytes() == formats.msht_bytes(back)


def test_mels_latc_vmap_gt_roundtrip(tmp_path, rng):
    feats = rng.normal(size=(3, 60, 80)).astype(np.float32)
    np.testing.assert_array_equal(_roundtrip(tmp_path, "f.mels", formats.write_mels, formats.read_mels,
                                             feats, formats.mels_bytes), feats)
    labels = rng.integers(0, 32, size=(6, 8))
    np.testing.assert_array_equal(_roundtrip(tmp_path, "c.latc", formats.write_latc, formats.read_latc,
                                             labels, formats.latc_bytes), labels)
    vals = rng.uniform(size=11).astype(np.float32)
    np.testing.assert_array_equal(_roundtrip(tmp_path, "m.vmap", formats.write_vmap, formats.read_vmap,
                                             vals, formats.vmap_bytes), vals)
    tracks = GroundTruthTracks(*rng.uniform(size=(3, 9)).astype(np.float32))
    back = _roundtrip(tmp_path, "s.gt", formats.write_gt, formats.read_gt, tracks, formats.gt_bytes)
    np.testing.assert_array_equal(back.as_array(), tracks.as_array())


def test_wav_roundtrip(tmp_path, rng):
    w = rng.uniform(-1, 1, 1600)
    path = tmp_path / "a.wav"
    formats.write_wav(path, w)
    back, rate = formats.read_wav(path)
    assert rate == 16000
    np.testing.assert_allclose(back, w, atol=1 / 32767)
    first = path.read_bytes()
    formats.write_wav(path, back)
    assert path.read_bytes() == first


def test_format_errors(tmp_path):
    p = tmp_path / "bad.mshs"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError, match="magic"):
        formats.read_mshs(p)
    p.write_bytes(formats.mshs_bytes(np.zeros((2, 2, 3)))[:-4])
    with pytest.raises(FormatError, match="truncated"):
        formats.read_mshs(p)
    p.write_bytes(formats.mshs_bytes(np.zeros((2, 2, 3))) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        formats.read_mshs(p)
    data = bytearray(formats.mels_bytes(np.zeros((1, 60, 80))))
    data[4] = 9
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        formats.read_mels(p)
    with pytest.raises(FormatError):
        formats.latc_bytes(np.array([[70000]]))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    formats.atomic_write(tmp_path / "x.bin", b"abc")
    assert os.listdir(tmp_path) == ["x.bin"]


def test_obj_export(tmp_path, rng):
    paths = formats.write_obj_frames(tmp_path / "obj", rng.normal(size=(2, 3, 3)))
    assert len(paths) == 2
    assert open(paths[0]).read().count("\nv ") == 2


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_byte_identical(tmp_path, tiny_hp):
    model = LatentModel(tiny_hp)
    prior = PriorModel(PriorParams(num_heads=2, num_classes=4, width=4, d_audio=8, audio_channels=4))
    ckpt = latent_checkpoint(model).merged(prior_checkpoint(prior))
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    first = path.read_bytes()
    Checkpoint.load(path).save(path)
    assert path.read_bytes() == first

    loaded = Checkpoint.load(path)
    m2, p2 = load_latent_model(loaded), load_prior(loaded)
    for (k, a), (_, b) in zip(model.state_dict().items(), m2.state_dict().items()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)
    for (k, a), (_, b) in zip(prior.state_dict().items(), p2.state_dict().items()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_checkpoint_rejects_inconsistent_shapes(tiny_hp):
    ckpt = latent_checkpoint(LatentModel(tiny_hp))
    ckpt.hparams["latent"]["num_classes"] = 5
    with pytest.raises(CheckpointError, match="C=5"):
        Checkpoint.from_bytes(ckpt.to_bytes())
    ckpt = latent_checkpoint(LatentModel(tiny_hp))
    ckpt.hparams["latent"]["num_vertices"] = 13
    with pytest.raises(CheckpointError, match="V=13"):
        Checkpoint.from_bytes(ckpt.to_bytes())
    other = prior_checkpoint(PriorModel(PriorParams(num_heads=3, num_classes=4, width=4, d_audio=8,
                                                     audio_channels=4)))
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(latent_checkpoint(LatentModel(tiny_hp)).merged(other).to_bytes())


def test_checkpoint_corrupt_data(tiny_hp):
    data = latent_checkpoint(LatentModel(tiny_hp)).to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(data[:-3])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(data[:20])
    with pytest.raises(CheckpointError):
        load_prior(Checkpoint.from_bytes(data))


def test_expr_only_checkpoint_has_no_audio_encoder(tiny_hp):
    tiny_hp.use_audio = False
    ckpt = latent_checkpoint(LatentModel(tiny_hp))
    assert ckpt.hparams["latent"]["use_audio"] is False
    assert not any(k.startswith("latent.encoder.audio.") for k in ckpt.tensors)


# ---------------------------------------------------------------- config

def test_config_dump_roundtrip_and_unknown_keys():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.dump()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_text("bogus.key = 1")
    with pytest.raises(ConfigError, match="fixed"):
        RunConfig.from_text("audio.hop = 100")
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig.from_text("train.steps = many")
    cfg = RunConfig.from_text("train.steps = 10  # short\nprior.dilations = 1,2\n")
    assert cfg["train.steps"] == 10 and cfg["prior.dilations"] == (1, 2)


def test_config_has_all_documented_defaults():
    dump = RunConfig().dump()
    for key, value in [("mask.w_high", "1.0"), ("mask.w_low", "0.1"), ("gumbel.tau_start", "2.0"),
                       ("gumbel.tau_end", "0.5"), ("prior.dilations", "1,2,4,8"),
                       ("latent.num_classes", "32"), ("latent.num_heads", "8"), ("train.lr", "0.0001"),
                       ("train.steps", "25000"), ("synth.blink_rate", "0.3"),
                       ("synth.blink_duration_ms", "150.0"), ("audio.n_fft", "1024"),
                       ("audio.win", "800"), ("audio.hop", "160"), ("audio.n_mels", "80"),
                       ("audio.log_floor", "1e-10"), ("prior.temperature", "1.0"),
                       ("latent.dec_widths", "256,128,64"), ("data.num_frames", "64")]:
        assert f"{key} = {value}\n" in dump
    assert len(dump.splitlines()) == len(DEFAULTS)


def test_config_builds_components():
    cfg = RunConfig({"train.mode": "expr_only_l2", "latent.num_heads": "4"})
    hp = cfg.hyperparams(240)
    assert hp.use_audio is False and hp.num_heads == 4
    assert cfg.train_config().w_low == 0.1
    assert cfg.prior_params(4, 32).dilations == (1, 2, 4, 8)


# ---------------------------------------------------------------- dataset trees

def test_dataset_tree_roundtrip_and_determinism(tmp_path):
    spec = CorpusSpec(train_identities=1, test_identities=1, sequences_per_identity=2, num_frames=8)
    corpus = make_corpus(spec, featurize=False)
    write_corpus(corpus, tmp_path / "a")
    write_corpus(make_corpus(spec, featurize=False), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    back = load_corpus(tmp_path / "a")
    assert [s.name for s in back] == [s.name for s in corpus]
    assert back.split("test").identities() == corpus.split("test").identities()
    np.testing.assert_allclose(back[0].sequence.frames, corpus[0].sequence.frames, atol=1e-4)
    assert back[0].features.shape == (8, 60, 80)
