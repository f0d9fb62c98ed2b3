import numpy as np
import pytest
import torch

from protolang.backbone import Backbone, BackboneConfig
from protolang.data import LabeledImageDataset, build_vocabulary, tokenize_descriptions
from protolang.language import DecoderConfig, build_decoder_stack
from protolang.worlds import generate_benchmark


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def toy_dataset(n_classes=10, per_class=20, res=16, splits=None, seed=0, dtype=np.uint8):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n_classes * per_class, res, res, 3)).astype(dtype)
    labels = np.repeat(np.arange(n_classes), per_class)
    splits = splits or {c: "base" for c in range(n_classes)}
    return LabeledImageDataset(images, labels, splits)


@pytest.fixture(scope="session")
def tiny_bench():
    """6 base / 5 val / 5 novel synthetic classes at 16x16 with 20 images each."""
    return generate_benchmark(6, 5, 5, 20, 7, n_descriptions=6, resolution=16)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_bench):
    base = {c: d for c, d in tiny_bench.descriptions.items() if tiny_bench.dataset.split_of[c] == "base"}
    return build_vocabulary(base)


@pytest.fixture(scope="session")
def tiny_descs(tiny_bench, tiny_vocab):
    return tokenize_descriptions(tiny_bench.descriptions, tiny_vocab)


TINY_DECODER = DecoderConfig(layers=1, hidden=16, heads=2, feed_forward=32, word_dim=8)


def tiny_backbone(res=16, seed=0):
    torch.manual_seed(seed)
    return Backbone(BackboneConfig(resolution=res))


def tiny_stack(vocab_size, d, cfg=TINY_DECODER, seed=0):
    return build_decoder_stack(vocab_size, d, cfg, seed=seed)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
