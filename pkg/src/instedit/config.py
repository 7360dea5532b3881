"""Application configuration: JSON file plus environment overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .capture import CaptureConfig
from .guidance import GuidanceWeights

ENV_PREFIX = "INSTEDIT_"


@dataclass(frozen=True)
class AppConfig:
    checkpoint: Path = Path("runs/model.pt")
    sessions_root: Path = Path("runs/sessions")
    corpus_dir: Path = Path("runs/corpus")
    parser_backend: str = "grammar"  # grammar | remote
    detector_backend: str = "blob"  # blob | remote
    parser_endpoint: str = ""
    detector_endpoint: str = ""
    remote_timeout: float = 10.0
    steps: int = 50
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    position_layers: tuple[str, ...] = ("dec1",)
    preserve_layers: tuple[str, ...] = ("dec3",)
    window_fraction: float = 0.8

    def capture_config(self) -> CaptureConfig:
        return CaptureConfig(
            position_layers=self.position_layers,
            preserve_layers=self.preserve_layers,
        )

    def to_dict(self) -> dict:
        return {
            "checkpoint": str(self.checkpoint),
            "sessions_root": str(self.sessions_root),
            "corpus_dir": str(self.corpus_dir),
            "parser_backend": self.parser_backend,
            "detector_backend": self.detector_backend,
            "parser_endpoint": self.parser_endpoint,
            "detector_endpoint": self.detector_endpoint,
            "remote_timeout": self.remote_timeout,
            "steps": self.steps,
            "weights": self.weights.to_dict(),
            "position_layers": list(self.position_layers),
            "preserve_layers": list(self.preserve_layers),
            "window_fraction": self.window_fraction,
        }


def load_config(path: Path | None = None, env: dict | None = None) -> AppConfig:
    """Build the config from defaults, then a JSON file, then INSTEDIT_*
    environment variables (highest precedence)."""
    cfg = AppConfig()
    if path is not None:
        data = json.loads(Path(path).read_text())
        cfg = _apply(cfg, data)
    env = os.environ if env is None else env
    overrides = {}
    for key in (
        "checkpoint",
        "sessions_root",
        "corpus_dir",
        "parser_backend",
        "detector_backend",
        "parser_endpoint",
        "detector_endpoint",
        "remote_timeout",
        "steps",
        "window_fraction",
    ):
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            overrides[key] = env[env_key]
    if overrides:
        cfg = _apply(cfg, overrides)
    return cfg


def _apply(cfg: AppConfig, data: dict) -> AppConfig:
    kwargs = {}
    for key, value in data.items():
        if key in ("checkpoint", "sessions_root", "corpus_dir"):
            kwargs[key] = Path(value)
        elif key in ("position_layers", "preserve_layers"):
            kwargs[key] = tuple(value)
        elif key == "weights":
            kwargs[key] = GuidanceWeights.from_dict(value)
        elif key == "steps":
            kwargs[key] = int(value)
        elif key in ("remote_timeout", "window_fraction"):
            kwargs[key] = float(value)
        elif key in (
            "parser_backend",
            "detector_backend",
            "parser_endpoint",
            "detector_endpoint",
        ):
            kwargs[key] = str(value)
        else:
            raise ValueError(f"unknown config key: {key}")
    return replace(cfg, **kwargs)
