import numpy as np
import pytest
import torch

from facecode.encoder import HyperParams
from facecode.synthdata import SynthConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hp():
    """A small model on a 12-vertex face, fast enough for per-test construction."""
    return HyperParams(num_vertices=12, num_classes=4, num_heads=2, d_audio=8, d_expr=8,
                       d_fuse=8, audio_channels=4, expr_hidden=8, code_embed=3,
                       dec_widths=(8, 8, 4), dec_lstm=8, continuous_dim=3)


@pytest.fixture
def small_synth():
    return SynthConfig(lip=4, mouth=4, upper_face=8, eyelid=4, other=4)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus():
    from facecode.dataset import CorpusSpec, make_corpus

    return make_corpus(CorpusSpec(train_identities=2, test_identities=1, sequences_per_identity=2,
                                  num_frames=16))


def small_model_hp(cfg, **kw):
    """Full-V model with narrow layers; trains a few steps in seconds."""
    from facecode.training import hparams_for

    opts = dict(num_classes=8, num_heads=2, d_audio=16, d_expr=16, d_fuse=16, audio_channels=8,
                expr_hidden=32, dec_widths=(32, 16, 8), dec_lstm=16, tau_anneal_steps=10)
    opts.update(kw)
    return hparams_for(cfg, 240, **opts)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
