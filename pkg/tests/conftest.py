from pathlib import Path

import pytest
import torch

from instedit.schedule import CosineSchedule
from instedit.text import Vocabulary
from instedit.unet import ModelConfig, TextConditionedUNet

ARTIFACTS = Path(__file__).parent / "_artifacts"


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return Vocabulary()


@pytest.fixture(scope="session")
def schedule() -> CosineSchedule:
    return CosineSchedule()


def make_tiny_model(vocab: Vocabulary, seed: int = 0, image_size: int = 32) -> TextConditionedUNet:
    """Small randomly initialized denoiser; enough for mechanics tests."""
    torch.manual_seed(seed)
    cfg = ModelConfig(
        vocab_size=vocab.size,
        seq_len=vocab.seq_len,
        image_size=image_size,
        base_channels=8,
        channel_mults=(1, 2, 3),
        num_heads=2,
        norm_groups=4,
    )
    model = TextConditionedUNet(cfg)
    model.eval()
    return model


@pytest.fixture()
def tiny_model(vocab) -> TextConditionedUNet:
    return make_tiny_model(vocab)


@pytest.fixture(scope="session")
def trained():
    """The desk-scale trained checkpoint; trains once and caches on disk."""
    from instedit.training import load_checkpoint

    path = ARTIFACTS / "model.pt"
    if not path.exists():
        from instedit.presets import train_desk_model

        ARTIFACTS.mkdir(exist_ok=True)
        train_desk_model(path, ARTIFACTS / "corpus", progress=True, snapshot_every=500)
    return load_checkpoint(path)
