"""Noise-prediction training and self-describing checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .data import DatasetRecord
from .schedule import CosineSchedule, add_noise
from .text import Vocabulary
from .unet import ModelConfig, TextConditionedUNet

CHECKPOINT_FORMAT = "instedit-checkpoint/1"


def training_loss(
    model: nn.Module,
    schedule: CosineSchedule,
    images: torch.Tensor,
    tokens: torch.Tensor,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean squared error between sampled and predicted noise (per-item
    uniform t in {1..T}, standard normal eps)."""
    if images.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    b = images.shape[0]
    t = torch.randint(
        1, schedule.total_steps + 1, (b,), generator=generator, device=images.device
    )
    eps = torch.randn(images.shape, generator=generator, device=images.device, dtype=images.dtype)
    z_t = add_noise(schedule, images, t, eps)
    pred, _ = model(z_t, t, tokens)
    return ((pred - eps) ** 2).mean()


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 2e-4
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 50


def train(
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    vocab: Vocabulary,
    records: list[DatasetRecord],
    config: TrainConfig,
    progress: bool = True,
) -> list[float]:
    """Adam training loop with conditioning dropout; returns the per-step
    loss history."""
    device = next(model.parameters()).device
    images = torch.from_numpy(np.stack([r.image for r in records])).to(device)
    tokens = torch.tensor([vocab.encode(r.caption) for r in records], device=device)
    null_row = torch.tensor(vocab.null_sequence(), device=device)

    gen = torch.Generator(device=device).manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    losses: list[float] = []
    model.train()
    iterator = range(config.steps)
    if progress:
        iterator = tqdm(iterator, desc="train", leave=False)
    for step in iterator:
        idx = torch.randint(0, len(records), (config.batch_size,), generator=gen, device=device)
        batch_tokens = tokens[idx].clone()
        drop = torch.rand(config.batch_size, generator=gen, device=device) < config.cond_dropout
        batch_tokens[drop] = null_row
        loss = training_loss(model, schedule, images[idx], batch_tokens, generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if progress and step % config.log_every == 0:
            iterator.set_postfix(loss=f"{losses[-1]:.4f}")
    model.eval()
    return losses


def save_checkpoint(
    path: Path,
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    vocab: Vocabulary,
    meta: dict | None = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": model.state_dict(),
        "model_config": model.cfg.to_dict(),
        "schedule": schedule.to_dict(),
        "vocab": vocab.to_dict(),
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(
    path: Path, device: str = "cpu"
) -> tuple[TextConditionedUNet, CosineSchedule, Vocabulary, dict]:
    payload = torch.load(Path(path), map_location=device, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = TextConditionedUNet(cfg).to(device)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    schedule = CosineSchedule.from_dict(payload["schedule"])
    vocab = Vocabulary.from_dict(payload["vocab"])
    return model, schedule, vocab, payload.get("meta", {})


def smoothed(values: list[float], window: int = 10) -> list[float]:
    """Trailing moving average; used for the training-sanity check."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out
