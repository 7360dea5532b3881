"""Deterministic DDIM sampling with classifier-free guidance.

sample() is a pure function of (weights, prompt, seed, settings): the
initial noise comes from a dedicated generator and the update loop is
deterministic, so identical inputs produce bit-identical images.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .capture import CaptureConfig, CaptureSet, store_step_captures
from .errors import EmptyMaskError, GuidanceError
from .schedule import CosineSchedule, ddim_update, sampling_ladder
from .text import Vocabulary
from .unet import TextConditionedUNet


@dataclass(frozen=True)
class SampleResult:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    seed: int
    steps: int
    prompt: str
    cfg_scale: float
    guided: bool
    captures: CaptureSet | None
    wall_time: float

    def __post_init__(self):
        self.image.setflags(write=False)


def cfg_noise(
    model: TextConditionedUNet,
    z_t: torch.Tensor,
    t: int,
    tokens: torch.Tensor,
    null_tokens: torch.Tensor,
    scale: float,
    want_attn=frozenset(),
    want_act=frozenset(),
):
    """Classifier-free noise estimate (1+s)*eps(z;t,y) - s*eps(z;t,null).

    Returns (eps, captures) with captures from the conditional branch.
    With scale 0 the unconditional branch is skipped entirely.
    """
    eps_cond, captures = model(z_t, t, tokens, want_attn=want_attn, want_act=want_act)
    if scale == 0.0:
        return eps_cond, captures
    with torch.no_grad():
        eps_uncond, _ = model(z_t, t, null_tokens)
    return (1.0 + scale) * eps_cond - scale * eps_uncond, captures


def prompt_tensors(vocab: Vocabulary, prompt: str, device) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = torch.tensor([vocab.encode(prompt)], dtype=torch.long, device=device)
    null_tokens = torch.tensor([vocab.null_sequence()], dtype=torch.long, device=device)
    return tokens, null_tokens


def sample(
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    vocab: Vocabulary,
    prompt: str,
    seed: int,
    steps: int = 50,
    cfg_scale: float = 3.0,
    noise_fn=None,
    capture_config: CaptureConfig | None = None,
) -> SampleResult:
    """Run the DDIM ladder from pure seed noise down to an image.

    noise_fn, when given, replaces the plain classifier-free estimate; it
    receives (z_t, t, step_index) and returns (eps_hat, raw_captures).
    Guidance failures abort with a diagnostic naming the failing step.
    """
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    tokens, null_tokens = prompt_tensors(vocab, prompt, device)

    if capture_config is not None and capture_config.enabled:
        model.validate_layers(capture_config.position_layers)
        model.validate_layers(capture_config.preserve_layers)
        captures = CaptureSet()
    else:
        captures = None

    gen = torch.Generator(device=device).manual_seed(seed)
    shape = (1, model.cfg.in_channels, model.cfg.image_size, model.cfg.image_size)
    z = torch.randn(shape, generator=gen, device=device, dtype=dtype)

    ladder = sampling_ladder(schedule.total_steps, steps)
    started = time.monotonic()
    was_training = model.training
    model.eval()
    try:
        for i in range(steps):
            t, t_prev = ladder[i], ladder[i + 1]
            capturing = captures is not None and capture_config.wants_step(i)
            try:
                if noise_fn is not None:
                    eps_hat, raw = noise_fn(z, t, i)
                else:
                    want_attn = (
                        frozenset(capture_config.position_layers) if capturing else frozenset()
                    )
                    want_act = (
                        frozenset(capture_config.preserve_layers) if capturing else frozenset()
                    )
                    with torch.no_grad():
                        eps_hat, raw = cfg_noise(
                            model, z, t, tokens, null_tokens, cfg_scale, want_attn, want_act
                        )
            except (EmptyMaskError, GuidanceError) as exc:
                raise type(exc)(f"sampling aborted at step {i} (t={t}): {exc}") from exc
            if not torch.isfinite(eps_hat).all():
                raise GuidanceError(f"non-finite noise estimate at step {i} (t={t})")
            if capturing and raw:
                store_step_captures(captures, raw, i, capture_config)
            with torch.no_grad():
                z = ddim_update(schedule, z, eps_hat, t, t_prev)
    finally:
        model.train(was_training)

    image = z[0].detach().cpu().clamp(-1.0, 1.0).numpy().astype(np.float32)
    return SampleResult(
        image=image,
        seed=seed,
        steps=steps,
        prompt=prompt,
        cfg_scale=cfg_scale,
        guided=noise_fn is not None,
        captures=captures,
        wall_time=time.monotonic() - started,
    )


def record_generation(
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    vocab: Vocabulary,
    prompt: str,
    seed: int,
    steps: int = 50,
    cfg_scale: float = 3.0,
    config: CaptureConfig | None = None,
) -> tuple[SampleResult, CaptureSet | None]:
    """Unguided sample that snapshots the configured layers at every
    configured step; the snapshots are the frozen originals an edit
    compares against."""
    if config is None:
        config = CaptureConfig()
    result = sample(
        model,
        schedule,
        vocab,
        prompt,
        seed,
        steps=steps,
        cfg_scale=cfg_scale,
        capture_config=config,
    )
    return result, result.captures
