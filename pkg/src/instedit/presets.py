"""Default desk-scale recipe: corpus, model size, and training settings.

One source of truth shared by the CLI, the test fixtures, and scripts, so
a checkpoint trained anywhere is interchangeable everywhere.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .data import build_corpus, load_corpus
from .schedule import CosineSchedule
from .text import Vocabulary
from .training import TrainConfig, save_checkpoint, train
from .unet import ModelConfig, TextConditionedUNet

DEFAULT_CORPUS_SIZE = 1500
DEFAULT_CORPUS_SEED = 100
DEFAULT_TRAIN_STEPS = 3000
DEFAULT_BATCH_SIZE = 8
DEFAULT_LR = 3e-4


def desk_model_config(vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab.size,
        seq_len=vocab.seq_len,
        base_channels=16,
        channel_mults=(1, 3, 6),
        num_heads=4,
    )


def ensure_corpus(corpus_dir: Path, n: int = DEFAULT_CORPUS_SIZE, seed: int = DEFAULT_CORPUS_SEED) -> Path:
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "meta.json").exists():
        build_corpus(n, seed=seed, out_dir=corpus_dir)
    return corpus_dir


def train_desk_model(
    checkpoint_path: Path,
    corpus_dir: Path,
    steps: int = DEFAULT_TRAIN_STEPS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    progress: bool = True,
    snapshot_every: int | None = None,
) -> list[float]:
    """Train the default model on the default corpus and save a checkpoint.

    Returns the loss history (also stored in the checkpoint metadata).
    """
    vocab = Vocabulary()
    schedule = CosineSchedule()
    records = load_corpus(ensure_corpus(corpus_dir))
    model = TextConditionedUNet(desk_model_config(vocab))

    losses: list[float] = []
    remaining = steps
    chunk = snapshot_every or steps
    while remaining > 0:
        this_chunk = min(chunk, remaining)
        cfg = TrainConfig(
            steps=this_chunk, batch_size=batch_size, lr=lr, seed=seed + len(losses)
        )
        losses += train(model, schedule, vocab, records, cfg, progress=progress)
        remaining -= this_chunk
        save_checkpoint(
            checkpoint_path,
            model,
            schedule,
            vocab,
            meta={
                "losses": losses,
                "train_steps": len(losses),
                "batch_size": batch_size,
                "lr": lr,
                "corpus": str(corpus_dir),
            },
        )
    return losses
