"""Energy terms for instance repositioning and their injection into sampling.

The position term scores a cross-attention map against the original and
shifted target masks; the preservation term is a masked MSE between the
original generation's activations and the edit pass's activations. Their
weighted total is differentiated with respect to the noisy image through
the conditional denoiser evaluation and added to the classifier-free noise
estimate, scaled by v * sigma(t).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .capture import CaptureConfig, CaptureSet
from .errors import GuidanceError
from .geometry import BoundingBox, GridMask, Shift, mask_area, rasterize_box, shift_mask
from .sampler import cfg_noise, prompt_tensors
from .schedule import CosineSchedule
from .text import Vocabulary
from .unet import TextConditionedUNet

PRESERVE_FEATURES = "features"
PRESERVE_ATTENTION = "attention"


@dataclass(frozen=True)
class GuidanceWeights:
    """(w0, w1, s, v): preservation, manipulation, classifier-free scale,
    energy-gradient weight."""

    w0: float = 1.0
    w1: float = 2.5
    s: float = 3.0
    v: float = 1.0

    def __post_init__(self):
        for name in ("w0", "w1", "s", "v"):
            value = getattr(self, name)
            if not torch.isfinite(torch.tensor(float(value))):
                raise ValueError(f"{name} must be finite")
        if self.w0 < 0 or self.w1 < 0 or self.v < 0:
            raise ValueError("w0, w1 and v must be nonnegative")

    def to_dict(self) -> dict:
        return {"w0": self.w0, "w1": self.w1, "s": self.s, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceWeights":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PlanObject:
    """A detected instance taking part in an edit."""

    box: BoundingBox
    token_span: tuple[int, int]
    label: str = ""
    instance_id: int = 0


@dataclass(frozen=True)
class EditPlan:
    """Everything the guided sampler needs: the detected object set, which
    instance moves where, the weights, and the capture placement."""

    objects: tuple[PlanObject, ...]
    edited_index: int
    shift: Shift
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    window_fraction: float = 0.8
    preserve_source: str = PRESERVE_FEATURES

    def __post_init__(self):
        if not (0 <= self.edited_index < len(self.objects)):
            raise ValueError("edited_index out of range")
        if not (0.0 <= self.window_fraction <= 1.0):
            raise ValueError("window_fraction must lie in [0, 1]")
        if self.preserve_source not in (PRESERVE_FEATURES, PRESERVE_ATTENTION):
            raise ValueError(f"unknown preserve_source: {self.preserve_source}")
        if self.weights.v > 0:
            if self.weights.w1 > 0 and not self.capture.position_layers:
                raise ValueError("position guidance needs at least one position layer")
            if self.weights.w0 > 0 and len(self.objects) > 1:
                needed = (
                    self.capture.preserve_layers
                    if self.preserve_source == PRESERVE_FEATURES
                    else self.capture.position_layers
                )
                if not needed:
                    raise ValueError("preservation guidance needs at least one layer")

    @property
    def edited(self) -> PlanObject:
        return self.objects[self.edited_index]

    @property
    def preserved(self) -> tuple[PlanObject, ...]:
        return tuple(
            o for i, o in enumerate(self.objects) if i != self.edited_index
        )


def _mask_tensor(mask: GridMask, like: torch.Tensor) -> torch.Tensor:
    return _const_tensor(mask.values, like)


def _const_tensor(array, like: torch.Tensor) -> torch.Tensor:
    # snapshots are stored read-only; copy before handing them to torch
    return torch.from_numpy(array.copy()).to(dtype=like.dtype, device=like.device)


def position_energy(
    attn: torch.Tensor, m_orig: GridMask, m_target: GridMask, norm: int
) -> torch.Tensor:
    """(-sum((A*M_target)^2) + sum((A*M_orig)^2)) / norm.

    Lower when attention mass sits in the target box, higher when it sits
    in the original box; norm is the original box's cell count.
    """
    if norm <= 0:
        raise ValueError("norm must be positive")
    if attn.shape != mask_shape(m_orig) or attn.shape != mask_shape(m_target):
        raise ValueError("attention map and masks must share a shape")
    t_orig = _mask_tensor(m_orig, attn)
    t_target = _mask_tensor(m_target, attn)
    return (-((attn * t_target) ** 2).sum() + ((attn * t_orig) ** 2).sum()) / norm


def preservation_energy(
    psi_orig: torch.Tensor,
    psi_edit: torch.Tensor,
    m_orig: GridMask,
    m_target: GridMask,
    norm: int,
) -> torch.Tensor:
    """Masked feature MSE sum((psi_orig*M_orig - psi_edit*M_target)^2) / norm
    over channels and cells."""
    if norm <= 0:
        raise ValueError("norm must be positive")
    if psi_orig.shape != psi_edit.shape:
        raise ValueError("feature grids must share a shape")
    if psi_orig.shape[-2:] != mask_shape(m_orig):
        raise ValueError("masks must match the feature resolution")
    t_orig = _mask_tensor(m_orig, psi_orig)
    t_target = _mask_tensor(m_target, psi_orig)
    return (((psi_orig * t_orig) - (psi_edit * t_target)) ** 2).sum() / norm


def mask_shape(mask: GridMask) -> tuple[int, int]:
    return (mask.height, mask.width)


@dataclass(frozen=True)
class _ObjectMasks:
    mask: GridMask
    norm: int


class PlanMasks:
    """Per-layer rasterized masks for the plan, built once per edit.

    Raises EmptyMaskError at build time when the shift pushes the edited
    object's mask fully off the grid at any configured resolution.
    """

    def __init__(self, plan: EditPlan, resolution_of):
        self.position: dict[str, tuple[GridMask, GridMask, int]] = {}
        for layer in plan.capture.position_layers:
            size = resolution_of(layer)
            m_orig = rasterize_box(plan.edited.box, size, size)
            m_target = shift_mask(m_orig, plan.shift)
            self.position[layer] = (m_orig, m_target, mask_area(m_orig))
        preserve_layers = (
            plan.capture.preserve_layers
            if plan.preserve_source == PRESERVE_FEATURES
            else plan.capture.position_layers
        )
        self.preserve: dict[str, list[_ObjectMasks]] = {}
        for layer in preserve_layers:
            size = resolution_of(layer)
            per_object = []
            for obj in plan.preserved:
                m = rasterize_box(obj.box, size, size)
                per_object.append(_ObjectMasks(mask=m, norm=mask_area(m)))
            self.preserve[layer] = per_object


def _span_mean(maps: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    start, end = span
    if not (0 <= start < end <= maps.shape[0]):
        raise ValueError(f"token span {span} out of range for {maps.shape[0]} tokens")
    return maps[start:end].mean(dim=0)


def total_guidance(
    plan: EditPlan,
    originals: CaptureSet,
    current: dict,
    step_index: int,
    masks: PlanMasks | None = None,
    resolution_of=None,
) -> torch.Tensor:
    """Weighted total energy: w0 * mean over preserved objects and layers
    of the preservation term + w1 * mean over position layers of the
    position term for the edited object. The preservation mean is 0 when
    the edited object is the only one."""
    if masks is None:
        if resolution_of is None:
            resolution_of = _resolutions_from_captures(plan, current)
        masks = PlanMasks(plan, resolution_of)

    some = next(iter(current.values()))
    zero = torch.zeros((), dtype=some.dtype, device=some.device)

    position_terms = []
    for layer in plan.capture.position_layers:
        maps = current[("attn", layer)][0]  # (L, H, W), in graph
        attn = _span_mean(maps, plan.edited.token_span)
        m_orig, m_target, norm = masks.position[layer]
        position_terms.append(position_energy(attn, m_orig, m_target, norm))
    g_position = torch.stack(position_terms).mean() if position_terms else zero

    preserve_terms = []
    if plan.preserved:
        per_object: list[list[torch.Tensor]] = [[] for _ in plan.preserved]
        for layer, object_masks in masks.preserve.items():
            if plan.preserve_source == PRESERVE_FEATURES:
                psi_edit = current[("act", layer)][0]  # (C, H, W)
                psi_orig = _const_tensor(
                    originals.activation(step_index, layer).features, psi_edit
                )
                for i, obj in enumerate(plan.preserved):
                    om = object_masks[i]
                    per_object[i].append(
                        preservation_energy(psi_orig, psi_edit, om.mask, om.mask, om.norm)
                    )
            else:
                maps_edit = current[("attn", layer)][0]
                maps_orig = _const_tensor(
                    originals.attention(step_index, layer).maps, maps_edit
                )
                for i, obj in enumerate(plan.preserved):
                    om = object_masks[i]
                    a_orig = _span_mean(maps_orig, obj.token_span)[None]
                    a_edit = _span_mean(maps_edit, obj.token_span)[None]
                    per_object[i].append(
                        preservation_energy(a_orig, a_edit, om.mask, om.mask, om.norm)
                    )
        object_means = [torch.stack(terms).mean() for terms in per_object]
        preserve_terms = object_means
    g_preserve = torch.stack(preserve_terms).mean() if preserve_terms else zero

    total = plan.weights.w0 * g_preserve + plan.weights.w1 * g_position
    if not torch.isfinite(total):
        raise GuidanceError(f"non-finite guidance energy at step {step_index}")
    return total


def _resolutions_from_captures(plan: EditPlan, current: dict):
    sizes = {}
    for (kind, layer), tensor in current.items():
        sizes[layer] = tensor.shape[-1]

    def resolution_of(layer: str) -> int:
        return sizes[layer]

    return resolution_of


def guidance_active(plan: EditPlan, step_index: int, steps: int) -> bool:
    """The energy gradient applies to the leading window of the ladder."""
    w = plan.weights
    if w.v == 0.0:
        return False
    if w.w1 == 0.0 and (w.w0 == 0.0 or not plan.preserved):
        return False
    return step_index < plan.window_fraction * steps


def guided_noise(
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    z_t: torch.Tensor,
    t: int,
    tokens: torch.Tensor,
    null_tokens: torch.Tensor,
    plan: EditPlan,
    originals: CaptureSet,
    step_index: int,
    steps: int,
    masks: PlanMasks | None = None,
):
    """Eq.-style guided estimate: classifier-free noise plus
    v * sigma(t) * grad_z of the total energy, the gradient flowing through
    the conditional branch's captures only. Exactly the plain
    classifier-free path when guidance is inactive."""
    s = plan.weights.s
    if not guidance_active(plan, step_index, steps):
        with torch.no_grad():
            return cfg_noise(model, z_t, t, tokens, null_tokens, s)

    want_attn = frozenset(plan.capture.position_layers)
    want_act = (
        frozenset(plan.capture.preserve_layers)
        if plan.preserve_source == PRESERVE_FEATURES and plan.preserved
        else frozenset()
    )
    z_req = z_t.detach().requires_grad_(True)
    eps_cond, raw = model(z_req, t, tokens, want_attn=want_attn, want_act=want_act)
    energy = total_guidance(
        plan, originals, raw, step_index, masks=masks, resolution_of=model.resolution_of
    )
    grad = torch.autograd.grad(energy, z_req)[0]
    if not torch.isfinite(grad).all():
        raise GuidanceError(f"non-finite guidance gradient at step {step_index} (t={t})")
    with torch.no_grad():
        if s == 0.0:
            eps = eps_cond.detach()
        else:
            eps_uncond, _ = model(z_t, t, null_tokens)
            eps = (1.0 + s) * eps_cond.detach() - s * eps_uncond
        eps = eps + plan.weights.v * schedule.sigma(t) * grad
    detached = {key: tensor.detach() for key, tensor in raw.items()}
    return eps, detached


def make_guided_noise_fn(
    model: TextConditionedUNet,
    schedule: CosineSchedule,
    vocab: Vocabulary,
    prompt: str,
    plan: EditPlan,
    originals: CaptureSet,
    steps: int,
):
    """Bind a plan to the sampler's noise_fn interface.

    Masks are rasterized up front so infeasible shifts fail before any
    sampling happens.
    """
    device = next(model.parameters()).device
    tokens, null_tokens = prompt_tensors(vocab, prompt, device)
    masks = PlanMasks(plan, model.resolution_of)

    def noise_fn(z_t: torch.Tensor, t: int, step_index: int):
        return guided_noise(
            model,
            schedule,
            z_t,
            t,
            tokens,
            null_tokens,
            plan,
            originals,
            step_index,
            steps,
            masks=masks,
        )

    return noise_fn
