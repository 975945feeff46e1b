import os
from pathlib import Path

import numpy as np
import pytest
import torch

from arralab.corpus import CorpusConfig, generate_split
from arralab.foundation import CrossModalEncoder, EncoderConfig, EncoderTrainConfig, EncoderTrainer
from arralab.tokenizers import TextVocab, Vocabulary, VqTokenizer, VqTrainConfig, VqTrainer

torch.set_num_threads(1)

# Small end-to-end config shared by the CLI and pipeline tests.
TINY_CONFIG = {
    "data": {"n_train": 300, "n_heldout": 32, "n_source": 200},
    "tokenizer": {"train": {"steps": 300}},
    "encoder": {"train": {"steps": 100}},
    "text_lm": {"steps": 30},
    "source": {"steps": 20},
    "train": {
        "steps": 20,
        "eval_every": 10,
        "n_eval": 32,
        "batch_size": 16,
        "model": {"n_layers": 2, "d_model": 64, "n_heads": 4},
    },
}


@pytest.fixture(scope="session")
def small_split():
    return generate_split(range(600), CorpusConfig())


@pytest.fixture(scope="session")
def tiny_assets(small_split):
    """Briefly trained VQ and cross-modal encoder, good enough for plumbing."""
    alt = generate_split(range(300), CorpusConfig(palette="alt"))
    vq = VqTokenizer()
    VqTrainer(vq, VqTrainConfig(steps=400)).fit(np.concatenate([small_split.images, alt.images]))
    vq.eval()
    vocab = TextVocab()
    enc = CrossModalEncoder(EncoderConfig(text_vocab=len(vocab)))
    EncoderTrainer(enc, vocab, EncoderTrainConfig(steps=60, batch_size=32)).fit(
        small_split.images, small_split.captions
    )
    return {"vq": vq, "vocab": vocab, "codes": Vocabulary(len(vocab), 64), "encoder": enc}


@pytest.fixture(scope="session")
def reference_root(tmp_path_factory):
    """Workspace for the reference-scale runs. ARRALAB_TEST_WORKSPACE reuses
    artifacts across sessions (safe: paths are content-addressed)."""
    env = os.environ.get("ARRALAB_TEST_WORKSPACE")
    return Path(env) if env else tmp_path_factory.mktemp("reference_ws")


@pytest.fixture(scope="session")
def reference_ws(reference_root):
    """Default-config workspace with data, tokenizer and cross-modal encoder
    built (roughly 3 minutes on one core)."""
    from arralab import pipeline

    ws = pipeline.Workspace(reference_root, pipeline.load_config())
    pipeline.gen_data(ws)
    pipeline.train_tokenizer(ws)
    pipeline.train_encoder(ws, "cross_modal")
    return ws


# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
