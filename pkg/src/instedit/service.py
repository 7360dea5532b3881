"""Session orchestration: generate -> parse -> detect -> edit.

A session directory is written atomically (staged under a temp name, then
renamed) and verified by manifest checksums on load, so interrupted writes
never produce a loadable session. The original image, captures and
detections are immutable; edits are append-only subdirectories with the
same stage-then-rename discipline.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capture import CaptureConfig, CaptureSet
from .config import AppConfig
from .data import load_png, save_png
from .errors import (
    AmbiguousMatchError,
    EmptyMaskError,
    GrammarError,
    GuidanceError,
    NoMatchError,
    RemoteError,
    SessionError,
)
from .geometry import BoundingBox, GridMask, Shift, rasterize_box, shift_mask
from .guidance import (
    PRESERVE_ATTENTION,
    PRESERVE_FEATURES,
    EditPlan,
    GuidanceWeights,
    PlanObject,
    make_guided_noise_fn,
)
from .sampler import record_generation, sample
from .scene import (
    BlobDetector,
    DetectedObject,
    InstanceSelection,
    ObjectDescriptor,
    RemoteConfig,
    RemoteDetector,
    RemoteParser,
    match_instances,
    parse_prompt,
)
from .training import load_checkpoint

SESSION_FORMAT = "instedit-session/1"


@dataclass(frozen=True)
class SessionSettings:
    steps: int = 50
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    position_layers: tuple[str, ...] = ("dec1",)
    preserve_layers: tuple[str, ...] = ("dec3",)
    window_fraction: float = 0.8

    def capture_config(self) -> CaptureConfig:
        return CaptureConfig(
            position_layers=self.position_layers, preserve_layers=self.preserve_layers
        )

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "weights": self.weights.to_dict(),
            "position_layers": list(self.position_layers),
            "preserve_layers": list(self.preserve_layers),
            "window_fraction": self.window_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSettings":
        return cls(
            steps=int(d["steps"]),
            weights=GuidanceWeights.from_dict(d["weights"]),
            position_layers=tuple(d["position_layers"]),
            preserve_layers=tuple(d["preserve_layers"]),
            window_fraction=float(d["window_fraction"]),
        )

    @classmethod
    def from_config(cls, cfg: AppConfig) -> "SessionSettings":
        return cls(
            steps=cfg.steps,
            weights=cfg.weights,
            position_layers=cfg.position_layers,
            preserve_layers=cfg.preserve_layers,
            window_fraction=cfg.window_fraction,
        )


def _detection_to_dict(d: DetectedObject) -> dict:
    return {
        "label": d.descriptor.label,
        "attributes": list(d.descriptor.attributes),
        "quantity": d.descriptor.quantity,
        "token_span": list(d.descriptor.token_span),
        "instance_id": d.instance_id,
        "box": d.box.as_list(),
        "confidence": d.confidence,
    }


def _detection_from_dict(d: dict) -> DetectedObject:
    descriptor = ObjectDescriptor(
        label=d["label"],
        attributes=tuple(d["attributes"]),
        quantity=d["quantity"],
        token_span=tuple(d["token_span"]),
    )
    return DetectedObject(
        descriptor=descriptor,
        instance_id=d["instance_id"],
        box=BoundingBox(*d["box"]),
        confidence=d["confidence"],
    )


@dataclass
class EditRecord:
    index: int
    status: str  # completed | failed
    selection: dict
    shift: dict
    weights: dict
    mode: str
    metrics: dict | None
    error: dict | None
    wall_time: float
    created_at: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "status": self.status,
            "selection": self.selection,
            "shift": self.shift,
            "weights": self.weights,
            "mode": self.mode,
            "metrics": self.metrics,
            "error": self.error,
            "wall_time": self.wall_time,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditRecord":
        return cls(**d)


@dataclass
class Session:
    session_id: str
    prompt: str
    seed: int
    settings: SessionSettings
    detections: list[DetectedObject]
    directory: Path
    created_at: float

    @property
    def original_image_path(self) -> Path:
        return self.directory / "original.png"

    def original_image(self) -> np.ndarray:
        return load_png(self.original_image_path)

    def captures(self) -> CaptureSet:
        return CaptureSet.load(self.directory / "captures")

    def edit_dirs(self) -> list[Path]:
        edits = self.directory / "edits"
        if not edits.exists():
            return []
        valid = []
        for child in sorted(edits.iterdir()):
            if child.name.isdigit() and (child / "record.json").exists():
                valid.append(child)
        return valid

    def edit_records(self) -> list[EditRecord]:
        return [
            EditRecord.from_dict(json.loads((d / "record.json").read_text()))
            for d in self.edit_dirs()
        ]

    def to_dict(self) -> dict:
        return {
            "id": self.session_id,
            "prompt": self.prompt,
            "seed": self.seed,
            "settings": self.settings.to_dict(),
            "detections": [_detection_to_dict(d) for d in self.detections],
            "created_at": self.created_at,
            "edits": [r.to_dict() for r in self.edit_records()],
        }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class SessionStore:
    """Directory-per-session persistence with atomic creation."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, session_id: str) -> Path:
        return self.root / session_id

    def list_ids(self) -> list[str]:
        ids = []
        for child in sorted(self.root.iterdir()):
            if child.is_dir() and (child / "manifest.json").exists():
                try:
                    self.load(child.name)
                except SessionError:
                    continue
                ids.append(child.name)
        return ids

    def create(
        self,
        session_id: str,
        prompt: str,
        seed: int,
        settings: SessionSettings,
        image: np.ndarray,
        captures: CaptureSet,
        detections: list[DetectedObject],
    ) -> Session:
        final_dir = self.path(session_id)
        if final_dir.exists():
            raise SessionError(f"session already exists: {session_id}")
        staging = self.root / f".tmp-{session_id}"
        staging.mkdir(parents=True)
        try:
            save_png(image, staging / "original.png")
            captures.save(staging / "captures")
            manifest = {
                "format": SESSION_FORMAT,
                "id": session_id,
                "prompt": prompt,
                "seed": seed,
                "settings": settings.to_dict(),
                "detections": [_detection_to_dict(d) for d in detections],
                "created_at": time.time(),
                "checksums": {
                    "original.png": _sha256(staging / "original.png"),
                    "captures/index.json": _sha256(staging / "captures" / "index.json"),
                },
            }
            (staging / "manifest.json").write_text(json.dumps(manifest, indent=2))
            staging.rename(final_dir)
        except Exception:
            import shutil

            shutil.rmtree(staging, ignore_errors=True)
            raise
        return self.load(session_id)

    def load(self, session_id: str) -> Session:
        directory = self.path(session_id)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise SessionError(f"no such session: {session_id}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise SessionError(f"corrupt session manifest: {session_id}") from exc
        if manifest.get("format") != SESSION_FORMAT:
            raise SessionError(f"unsupported session format: {manifest.get('format')}")
        for rel, digest in manifest["checksums"].items():
            target = directory / rel
            if not target.exists() or _sha256(target) != digest:
                raise SessionError(f"checksum mismatch in session {session_id}: {rel}")
        return Session(
            session_id=manifest["id"],
            prompt=manifest["prompt"],
            seed=manifest["seed"],
            settings=SessionSettings.from_dict(manifest["settings"]),
            detections=[_detection_from_dict(d) for d in manifest["detections"]],
            directory=directory,
            created_at=manifest["created_at"],
        )

    def append_edit(
        self, session: Session, record: EditRecord, result_image: np.ndarray | None
    ) -> EditRecord:
        edits = session.directory / "edits"
        edits.mkdir(exist_ok=True)
        staging = edits / f".tmp-{record.index:03d}-{uuid.uuid4().hex[:6]}"
        staging.mkdir()
        if result_image is not None:
            save_png(result_image, staging / "result.png")
        (staging / "record.json").write_text(json.dumps(record.to_dict(), indent=2))
        staging.rename(edits / f"{record.index:03d}")
        return record


def region_mse(
    original: np.ndarray, edited: np.ndarray, exclude: GridMask
) -> float:
    """Pixel MSE between two images outside the excluded region."""
    keep = exclude.values == 0
    if not keep.any():
        return 0.0
    diff = (original - edited) ** 2
    return float(diff[:, keep].mean())


def edited_region_mask(box: BoundingBox, shift: Shift, size: int) -> GridMask:
    """Union of the original and shifted boxes at pixel resolution."""
    m_orig = rasterize_box(box, size, size)
    try:
        m_target = shift_mask(m_orig, shift)
        union = np.clip(m_orig.values.astype(np.int16) + m_target.values, 0, 1)
    except EmptyMaskError:
        union = m_orig.values
    return GridMask(union.astype(np.uint8))


def _center_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def edit_metrics(
    session: Session,
    edited: DetectedObject,
    shift: Shift,
    result_image: np.ndarray,
    redetections: list[DetectedObject],
) -> dict:
    """Detector-verified outcome of an edit.

    displacement_achieved: distance from the intended target center to the
    nearest re-detected center of the edited object's class.
    nonedited_moves: per preserved instance, distance from its original
    center to the nearest re-detected center of its own class.
    preservation_mse: pixel MSE outside the edited object's orig+target region.
    """
    target_center = (
        edited.box.center[0] + shift.dx,
        edited.box.center[1] + shift.dy,
    )

    def same_class(d: DetectedObject, ref: DetectedObject) -> bool:
        return (
            d.descriptor.label == ref.descriptor.label
            and d.descriptor.attributes == ref.descriptor.attributes
        )

    edited_candidates = [d for d in redetections if same_class(d, edited)]
    displacement = (
        min(_center_distance(d.box.center, target_center) for d in edited_candidates)
        if edited_candidates
        else None
    )

    nonedited_moves = []
    for d in session.detections:
        if d.descriptor == edited.descriptor and d.instance_id == edited.instance_id:
            continue
        candidates = [r for r in redetections if same_class(r, d)]
        move = (
            min(_center_distance(r.box.center, d.box.center) for r in candidates)
            if candidates
            else None
        )
        nonedited_moves.append(
            {
                "label": d.descriptor.label,
                "attributes": list(d.descriptor.attributes),
                "instance_id": d.instance_id,
                "moved": move,
            }
        )

    size = result_image.shape[-1]
    exclude = edited_region_mask(edited.box, shift, size)
    mse = region_mse(session.original_image(), result_image, exclude)

    return {
        "target_center": list(target_center),
        "displacement_achieved": displacement,
        "nonedited_moves": nonedited_moves,
        "preservation_mse": mse,
        "redetections": [_detection_to_dict(d) for d in redetections],
    }


class PipelineEngine:
    """Binds a checkpoint and backends to the session lifecycle."""

    def __init__(self, config: AppConfig):
        self.config = config
        self.model, self.schedule, self.vocab, self.meta = load_checkpoint(
            config.checkpoint
        )
        self.store = SessionStore(config.sessions_root)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _parse(self, prompt: str) -> list[ObjectDescriptor]:
        if self.config.parser_backend == "remote":
            parser = RemoteParser(
                RemoteConfig(self.config.parser_endpoint, self.config.remote_timeout)
            )
            return parser.parse(prompt)
        return parse_prompt(prompt)

    def _detect(
        self, image: np.ndarray, descriptors: list[ObjectDescriptor]
    ) -> list[DetectedObject]:
        if self.config.detector_backend == "remote":
            detector = RemoteDetector(
                RemoteConfig(self.config.detector_endpoint, self.config.remote_timeout)
            )
            return detector.detect(image, descriptors)
        return BlobDetector().detect(image, descriptors)

    def create_session(
        self, prompt: str, seed: int, settings: SessionSettings | None = None
    ) -> Session:
        settings = settings or SessionSettings.from_config(self.config)
        descriptors = self._parse(prompt)  # fail fast, before sampling
        result, captures = record_generation(
            self.model,
            self.schedule,
            self.vocab,
            prompt,
            seed,
            steps=settings.steps,
            cfg_scale=settings.weights.s,
            config=settings.capture_config(),
        )
        detections = self._detect(result.image, descriptors)
        session_id = uuid.uuid4().hex[:12]
        return self.store.create(
            session_id, prompt, seed, settings, result.image, captures, detections
        )

    def get_session(self, session_id: str) -> Session:
        return self.store.load(session_id)

    def apply_edit(
        self,
        session_id: str,
        selection: InstanceSelection,
        shift: Shift,
        weights: GuidanceWeights | None = None,
        mode: str = PRESERVE_FEATURES,
    ) -> EditRecord:
        """Re-run sampling with guidance; always appends an EditRecord.

        Domain failures (no match, infeasible shift, numerical failure)
        produce a failed record and leave the session otherwise unchanged.
        """
        session = self.store.load(session_id)
        lock = self._lock_for(session_id)
        with lock:
            index = len(session.edit_dirs())
            weights = weights or session.settings.weights
            started = time.monotonic()
            base_record = dict(
                index=index,
                selection={
                    "label": selection.label,
                    "attributes": list(selection.attributes),
                    "instance_id": selection.instance_id,
                },
                shift={"dx": shift.dx, "dy": shift.dy},
                weights=weights.to_dict(),
                mode=mode,
                created_at=time.time(),
            )
            try:
                record, image = self._run_edit(
                    session, selection, shift, weights, mode, base_record, started
                )
            except (NoMatchError, AmbiguousMatchError, EmptyMaskError, GuidanceError) as exc:
                record = EditRecord(
                    status="failed",
                    metrics=None,
                    error={
                        "stage": _stage_of(exc),
                        "code": type(exc).__name__.removesuffix("Error"),
                        "message": str(exc),
                    },
                    wall_time=time.monotonic() - started,
                    **base_record,
                )
                image = None
            return self.store.append_edit(session, record, image)

    def _run_edit(
        self,
        session: Session,
        selection: InstanceSelection,
        shift: Shift,
        weights: GuidanceWeights,
        mode: str,
        base_record: dict,
        started: float,
    ) -> tuple[EditRecord, np.ndarray]:
        edited = match_instances(session.detections, selection)
        objects = tuple(
            PlanObject(
                box=d.box,
                token_span=d.descriptor.token_span,
                label=d.descriptor.label,
                instance_id=d.instance_id,
            )
            for d in session.detections
        )
        edited_index = next(
            i
            for i, d in enumerate(session.detections)
            if d.descriptor == edited.descriptor and d.instance_id == edited.instance_id
        )
        plan = EditPlan(
            objects=objects,
            edited_index=edited_index,
            shift=shift,
            weights=weights,
            capture=session.settings.capture_config(),
            window_fraction=session.settings.window_fraction,
            preserve_source=mode,
        )
        originals = session.captures()
        noise_fn = make_guided_noise_fn(
            self.model,
            self.schedule,
            self.vocab,
            session.prompt,
            plan,
            originals,
            session.settings.steps,
        )
        result = sample(
            self.model,
            self.schedule,
            self.vocab,
            session.prompt,
            session.seed,
            steps=session.settings.steps,
            cfg_scale=weights.s,
            noise_fn=noise_fn,
        )
        descriptors = [d.descriptor for d in _unique_descriptors(session.detections)]
        redetections = self._detect(result.image, descriptors)
        metrics = edit_metrics(session, edited, shift, result.image, redetections)
        record = EditRecord(
            status="completed",
            metrics=metrics,
            error=None,
            wall_time=time.monotonic() - started,
            **base_record,
        )
        return record, result.image

    def ablation_run(
        self,
        session_id: str,
        selection: InstanceSelection,
        shift: Shift,
        weights: GuidanceWeights | None = None,
    ) -> dict:
        """Paired edits: activation-based vs attention-based preservation,
        compared on non-edited-region pixel MSE."""
        features = self.apply_edit(
            session_id, selection, shift, weights, mode=PRESERVE_FEATURES
        )
        attention = self.apply_edit(
            session_id, selection, shift, weights, mode=PRESERVE_ATTENTION
        )
        comparison = {
            "mse_features": features.metrics["preservation_mse"]
            if features.metrics
            else None,
            "mse_attention": attention.metrics["preservation_mse"]
            if attention.metrics
            else None,
        }
        return {
            "records": [features.to_dict(), attention.to_dict()],
            "comparison": comparison,
        }


def _unique_descriptors(detections: list[DetectedObject]) -> list[DetectedObject]:
    seen = []
    out = []
    for d in detections:
        key = (d.descriptor.label, d.descriptor.attributes)
        if key not in seen:
            seen.append(key)
            out.append(d)
    return out


def _stage_of(exc: Exception) -> str:
    if isinstance(exc, (NoMatchError, AmbiguousMatchError)):
        return "match"
    if isinstance(exc, EmptyMaskError):
        return "plan"
    if isinstance(exc, GuidanceError):
        return "sample"
    if isinstance(exc, GrammarError):
        return "parse"
    if isinstance(exc, RemoteError):
        return "remote"
    return "internal"
