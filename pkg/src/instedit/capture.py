"""Cross-attention and activation snapshots taken during sampling.

A recorded generation stores, for every configured sampler step and layer,
the head-averaged per-token attention grids and the block output features.
Snapshots are immutable numpy arrays; the archive format is a directory of
.npy files plus an index manifest and is loadable without the model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CaptureError

ARCHIVE_FORMAT = "instedit-captures/1"


@dataclass(frozen=True)
class AttentionCapture:
    """Per-token spatial attention at one (step, layer)."""

    layer: str
    step: int
    maps: np.ndarray  # (L, H, W), nonnegative, cellwise token sums ~ 1

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ValueError(f"attention maps must be (L, H, W), got {self.maps.shape}")
        self.maps.setflags(write=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass(frozen=True)
class ActivationCapture:
    """Block output features at one (step, layer)."""

    layer: str
    step: int
    features: np.ndarray  # (C, H, W)

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ValueError(f"features must be (C, H, W), got {self.features.shape}")
        self.features.setflags(write=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


@dataclass(frozen=True)
class CaptureConfig:
    """Which layers and sampler steps to snapshot.

    steps None means every step; an empty tuple disables capture.
    """

    position_layers: tuple[str, ...] = ("dec1",)
    preserve_layers: tuple[str, ...] = ("dec3",)
    steps: tuple[int, ...] | None = None

    def wants_step(self, step_index: int) -> bool:
        if self.steps is None:
            return True
        return step_index in self.steps

    @property
    def enabled(self) -> bool:
        return self.steps is None or len(self.steps) > 0

    def to_dict(self) -> dict:
        return {
            "position_layers": list(self.position_layers),
            "preserve_layers": list(self.preserve_layers),
            "steps": None if self.steps is None else list(self.steps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptureConfig":
        steps = d.get("steps")
        return cls(
            position_layers=tuple(d["position_layers"]),
            preserve_layers=tuple(d["preserve_layers"]),
            steps=None if steps is None else tuple(steps),
        )


class CaptureSet:
    """Read-only store of captures keyed by (step_index, layer)."""

    def __init__(self):
        self._attention: dict[tuple[int, str], AttentionCapture] = {}
        self._activation: dict[tuple[int, str], ActivationCapture] = {}

    def add_attention(self, cap: AttentionCapture) -> None:
        self._attention[(cap.step, cap.layer)] = cap

    def add_activation(self, cap: ActivationCapture) -> None:
        self._activation[(cap.step, cap.layer)] = cap

    def attention(self, step: int, layer: str) -> AttentionCapture:
        try:
            return self._attention[(step, layer)]
        except KeyError:
            raise CaptureError(f"no attention capture for step {step}, layer {layer!r}") from None

    def activation(self, step: int, layer: str) -> ActivationCapture:
        try:
            return self._activation[(step, layer)]
        except KeyError:
            raise CaptureError(f"no activation capture for step {step}, layer {layer!r}") from None

    def has_step(self, step: int) -> bool:
        return any(s == step for s, _ in self._attention) or any(
            s == step for s, _ in self._activation
        )

    def __len__(self) -> int:
        return len(self._attention) + len(self._activation)

    def nbytes(self) -> int:
        return sum(c.maps.nbytes for c in self._attention.values()) + sum(
            c.features.nbytes for c in self._activation.values()
        )

    def items(self):
        for (step, layer), cap in sorted(self._attention.items()):
            yield "attention", step, layer, cap.maps
        for (step, layer), cap in sorted(self._activation.items()):
            yield "activation", step, layer, cap.features

    def save(self, directory: Path) -> None:
        """Write the archive: raw grids plus an index manifest with checksums."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"format": ARCHIVE_FORMAT, "entries": []}
        for kind, step, layer, grid in self.items():
            name = f"{kind}_{step:04d}_{layer}.npy"
            path = directory / name
            np.save(path, grid)
            index["entries"].append(
                {
                    "kind": kind,
                    "step": step,
                    "layer": layer,
                    "shape": list(grid.shape),
                    "dtype": str(grid.dtype),
                    "file": name,
                    "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
                }
            )
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: Path) -> "CaptureSet":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        if index.get("format") != ARCHIVE_FORMAT:
            raise CaptureError(f"unsupported capture archive: {index.get('format')}")
        out = cls()
        for entry in index["entries"]:
            path = directory / entry["file"]
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != entry["sha256"]:
                raise CaptureError(f"checksum mismatch for {entry['file']}")
            grid = np.load(path)
            if entry["kind"] == "attention":
                out.add_attention(AttentionCapture(entry["layer"], entry["step"], grid))
            elif entry["kind"] == "activation":
                out.add_activation(ActivationCapture(entry["layer"], entry["step"], grid))
            else:
                raise CaptureError(f"unknown capture kind: {entry['kind']}")
        return out


def token_map(capture: AttentionCapture, token_span: tuple[int, int]) -> np.ndarray:
    """Mean attention grid over a token index range [start, end)."""
    start, end = token_span
    length = capture.maps.shape[0]
    if not (0 <= start < end <= length):
        raise ValueError(f"token span {token_span} out of range for {length} tokens")
    return capture.maps[start:end].mean(axis=0)


def store_step_captures(
    store: CaptureSet, raw: dict, step_index: int, config: CaptureConfig
) -> None:
    """Detach a forward pass's raw captures into immutable numpy snapshots."""
    for layer in config.position_layers:
        grids = raw[("attn", layer)]
        store.add_attention(
            AttentionCapture(
                layer=layer,
                step=step_index,
                maps=grids[0].detach().cpu().numpy().astype(np.float32),
            )
        )
    for layer in config.preserve_layers:
        grids = raw[("act", layer)]
        store.add_activation(
            ActivationCapture(
                layer=layer,
                step=step_index,
                features=grids[0].detach().cpu().numpy().astype(np.float32),
            )
        )
