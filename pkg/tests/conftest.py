import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)


@pytest.fixture
def rng():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


@pytest.fixture
def tiny_corpus(tmp_path):
    """A small on-disk toy corpus shared by data/CLI tests."""
    from ctxseg.toy import gen_toy_corpus

    gen_toy_corpus(tmp_path / "train", n_images=16, size=64, n_classes=4, seed=7,
                   n_centers=4)
    gen_toy_corpus(tmp_path / "test", n_images=6, size=64, n_classes=4, seed=99,
                   n_centers=2, center_prefix="t")
    return tmp_path
