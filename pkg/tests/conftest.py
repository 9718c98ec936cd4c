import numpy as np
import pytest

from dmdp.data import default_vocab, gen_aligned_pairs
from dmdp.encoder import DualEncoderParams, EncoderConfig, contrastive_pretrain, freeze

TINY = EncoderConfig(d_t=8, d_v=16, d=8, L=2, heads=2, max_text_len=6, vocab_size=48)
SQUARE = EncoderConfig(d_t=8, d_v=8, d=8, L=3, heads=2, max_text_len=6, vocab_size=48)


@pytest.fixture
def tiny_backbone():
    return freeze(DualEncoderParams.init(TINY, seed=3))


@pytest.fixture
def square_backbone():
    return freeze(DualEncoderParams.init(SQUARE, seed=4))


def random_batch(enc: EncoderConfig, B: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(B, enc.image_size, enc.image_size))
    n = enc.max_text_len
    ids = rng.integers(3, enc.vocab_size, size=(B, n))
    eos = rng.integers(1, n, size=B)
    ids[np.arange(B), eos] = 2
    for b in range(B):
        ids[b, eos[b] + 1 :] = 0
    labels = rng.integers(0, 2, size=B)
    return images, ids, eos, labels


@pytest.fixture(scope="session")
def pretrained():
    """Desk-scale contrastively pretrained backbone shared by the slow tests."""
    vocab = default_vocab()
    enc = EncoderConfig(vocab_size=len(vocab), L=4)
    params = DualEncoderParams.init(enc, seed=0)
    pairs = gen_aligned_pairs(1024, 0, vocab, enc.max_text_len)
    res = contrastive_pretrain(params, pairs, epochs=30, lr=3e-3, seed=0, batch_size=16)
    return freeze(params), vocab, res, pairs


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
