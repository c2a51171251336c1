"""In-memory corpus of paired (template, mesh sequence, audio) samples."""
from dataclasses import dataclass, field

import numpy as np

from .audiofeat import mel_spectrogram
from .synthdata import SynthConfig, synth_identity, synth_sequence, synth_speech

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    identity: str
    name: str
    split: str
    template: object
    sequence: object
    waveform: np.ndarray
    tracks: object = None
    features: np.ndarray = None

    def featurize(self):
        if self.features is None:
            self.features = mel_spectrogram(self.waveform, self.sequence.num_frames)
        return self.features


@dataclass
class Corpus:
    samples: list = field(default_factory=list)

    def split(self, name):
        return Corpus([s for s in self.samples if s.split == name])

    def identities(self, split=None):
        seen = []
        for s in self.samples:
            if (split is None or s.split == split) and s.identity not in seen:
                seen.append(s.identity)
        return seen

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def arrays(self):
        """Stacked float32 arrays: frames (N,T,V,3), features (N,T,60,80), templates (N,V,3)."""
        lengths = {s.sequence.num_frames for s in self.samples}
        if len(lengths) != 1:
            raise ValueError(f"samples have different lengths {sorted(lengths)}; crop first")
        frames = np.stack([s.sequence.frames for s in self.samples]).astype(np.float32)
        feats = np.stack([s.featurize() for s in self.samples]).astype(np.float32)
        templates = np.stack([s.template.vertices for s in self.samples]).astype(np.float32)
        return frames, feats, templates


@dataclass
class CorpusSpec:
    seed: int = 0
    train_identities: int = 8
    val_identities: int = 0
    test_identities: int = 2
    sequences_per_identity: int = 20
    num_frames: int = 64


def identity_splits(spec):
    """Deterministic identity seeds per split; identity sets never overlap."""
    rng = np.random.default_rng([spec.seed, 101])
    total = spec.train_identities + spec.val_identities + spec.test_identities
    seeds = rng.choice(100000, size=total, replace=False)
    splits = (["train"] * spec.train_identities + ["val"] * spec.val_identities
              + ["test"] * spec.test_identities)
    return list(zip(seeds.tolist(), splits))


def make_corpus(spec=None, config=None, featurize=True):
    spec = spec or CorpusSpec()
    config = config or SynthConfig()
    samples = []
    duration = spec.num_frames / config.fps
    for id_seed, split in identity_splits(spec):
        template = synth_identity(id_seed, config)
        for j in range(spec.sequences_per_identity):
            audio_seed = id_seed * 1000 + j
            speech = synth_speech(audio_seed, duration, config.amplitude)
            seq, tracks = synth_sequence(template, speech.waveform, audio_seed + 7, config)
            sample = Sample(template.identity_id, f"seq{j:03d}", split, template, seq,
                            speech.waveform, tracks)
            if featurize:
                sample.featurize()
            samples.append(sample)
    return Corpus(samples)


# ---------------------------------------------------------------- on-disk trees
#
# <root>/manifest.tsv                 identity, split, sequence name per line
# <root>/<identity>/template.msht
# <root>/<identity>/<seq>.wav|.mshs|.gt (and .mels once featurized)

MANIFEST = "manifest.tsv"


class DatasetError(ValueError):
    pass


def write_corpus(corpus, root):
    """Write a corpus as a dataset tree; files are written atomically in a fixed order."""
    import os

    from . import formats

    os.makedirs(root, exist_ok=True)
    lines = ["identity\tsplit\tsequence\n"]
    written = set()
    for s in corpus:
        d = os.path.join(root, s.identity)
        if s.identity not in written:
            formats.write_msht(os.path.join(d, "template.msht"), s.template)
            written.add(s.identity)
        base = os.path.join(d, s.name)
        formats.write_wav(base + ".wav", s.waveform)
        formats.write_mshs(base + ".mshs", s.sequence.frames)
        if s.tracks is not None:
            formats.write_gt(base + ".gt", s.tracks)
        if s.features is not None:
            formats.write_mels(base + ".mels", s.features)
        lines.append(f"{s.identity}\t{s.split}\t{s.name}\n")
    formats.atomic_write(os.path.join(root, MANIFEST), "".join(lines).encode())


def read_manifest(root):
    import os

    path = os.path.join(root, MANIFEST)
    try:
        with open(path) as f:
            rows = [line.rstrip("\n").split("\t") for line in f][1:]
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from None
    for i, row in enumerate(rows, 2):
        if len(row) != 3 or row[1] not in SPLITS:
            raise DatasetError(f"{path}:{i}: malformed manifest row {row!r}")
    return rows


def load_corpus(root, split=None, featurize=True):
    """Read a dataset tree back; features come from .mels files when present."""
    import os

    from . import formats

    samples, templates = [], {}
    for identity, sp, name in read_manifest(root):
        if split is not None and sp != split:
            continue
        d = os.path.join(root, identity)
        if identity not in templates:
            templates[identity] = formats.read_msht(os.path.join(d, "template.msht"), identity)
        base = os.path.join(d, name)
        wave_, rate = formats.read_wav(base + ".wav")
        if rate != SynthConfig().sample_rate:
            raise DatasetError(f"{base}.wav: sample rate {rate}")
        seq = formats.read_mshs(base + ".mshs")
        seq.check_template(templates[identity])
        tracks = formats.read_gt(base + ".gt") if os.path.exists(base + ".gt") else None
        feats = formats.read_mels(base + ".mels") if os.path.exists(base + ".mels") else None
        sample = Sample(identity, name, sp, templates[identity], seq, wave_, tracks, feats)
        if featurize:
            sample.featurize()
        samples.append(sample)
    return Corpus(samples)
