"""HTTP API over the pipeline engine, consumed by the browser UI.

Create and edit are synchronous at toy scale; every response carries a
``status`` field so longer-running backends can switch to polling without
changing the contract. Errors are ``{stage, code, message}`` JSON bodies.
"""

from __future__ import annotations

import io

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel, Field

from .data import to_uint8
from .errors import (
    AmbiguousMatchError,
    EmptyMaskError,
    GrammarError,
    GuidanceError,
    InstEditError,
    NoMatchError,
    RemoteError,
    SessionError,
)
from .geometry import Shift
from .guidance import PRESERVE_FEATURES, GuidanceWeights
from .scene import InstanceSelection
from .service import PipelineEngine, SessionSettings, _stage_of

_STATUS = {
    NoMatchError: 422,
    AmbiguousMatchError: 422,
    EmptyMaskError: 422,
    GrammarError: 422,
    GuidanceError: 500,
    RemoteError: 502,
    SessionError: 404,
}


class WeightsBody(BaseModel):
    w0: float = 1.0
    w1: float = 2.5
    s: float = 3.0
    v: float = 1.0

    def to_weights(self) -> GuidanceWeights:
        return GuidanceWeights(w0=self.w0, w1=self.w1, s=self.s, v=self.v)


class SettingsBody(BaseModel):
    steps: int | None = None
    weights: WeightsBody | None = None


class CreateSessionBody(BaseModel):
    prompt: str
    seed: int = 0
    settings: SettingsBody | None = None


class SelectionBody(BaseModel):
    label: str
    attributes: list[str] = Field(default_factory=list)
    instance_id: int | None = None

    def to_selection(self) -> InstanceSelection:
        return InstanceSelection(
            label=self.label,
            attributes=tuple(self.attributes),
            instance_id=self.instance_id,
        )


class ShiftBody(BaseModel):
    dx: float
    dy: float


class EditBody(BaseModel):
    selection: SelectionBody
    shift: ShiftBody
    weights: WeightsBody | None = None
    mode: str = PRESERVE_FEATURES


def _png_response(image: np.ndarray) -> Response:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def _session_json(engine: PipelineEngine, session_id: str) -> dict:
    session = engine.get_session(session_id)
    body = session.to_dict()
    body["status"] = "completed"
    return body


def create_app(engine: PipelineEngine) -> FastAPI:
    app = FastAPI(title="instedit", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(InstEditError)
    async def _domain_error(request: Request, exc: InstEditError):
        status = 500
        for cls, code in _STATUS.items():
            if isinstance(exc, cls):
                status = code
                break
        return JSONResponse(
            status_code=status,
            content={
                "stage": _stage_of(exc),
                "code": type(exc).__name__.removesuffix("Error"),
                "message": str(exc),
            },
        )

    @app.get("/health")
    def health():
        return {"status": "ok", "checkpoint": str(engine.config.checkpoint)}

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": engine.store.list_ids()}

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        settings = None
        if body.settings is not None:
            base = SessionSettings.from_config(engine.config)
            settings = SessionSettings(
                steps=body.settings.steps or base.steps,
                weights=(
                    body.settings.weights.to_weights()
                    if body.settings.weights
                    else base.weights
                ),
                position_layers=base.position_layers,
                preserve_layers=base.preserve_layers,
                window_fraction=base.window_fraction,
            )
        session = engine.create_session(body.prompt, body.seed, settings)
        return _session_json(engine, session.session_id)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_json(engine, session_id)

    @app.get("/sessions/{session_id}/image")
    def get_session_image(session_id: str):
        session = engine.get_session(session_id)
        return _png_response(session.original_image())

    @app.post("/sessions/{session_id}/edits")
    def create_edit(session_id: str, body: EditBody):
        record = engine.apply_edit(
            session_id,
            body.selection.to_selection(),
            Shift(body.shift.dx, body.shift.dy),
            body.weights.to_weights() if body.weights else None,
            mode=body.mode,
        )
        payload = record.to_dict()
        if record.status == "failed":
            return JSONResponse(status_code=422, content=payload)
        return payload

    @app.get("/sessions/{session_id}/edits/{index}")
    def get_edit(session_id: str, index: int):
        session = engine.get_session(session_id)
        records = session.edit_records()
        if index < 0 or index >= len(records):
            return JSONResponse(
                status_code=404,
                content={
                    "stage": "session",
                    "code": "NotFound",
                    "message": f"no edit {index} in session {session_id}",
                },
            )
        return records[index].to_dict()

    @app.get("/sessions/{session_id}/edits/{index}/image")
    def get_edit_image(session_id: str, index: int):
        session = engine.get_session(session_id)
        path = session.directory / "edits" / f"{index:03d}" / "result.png"
        if not path.exists():
            return JSONResponse(
                status_code=404,
                content={
                    "stage": "session",
                    "code": "NotFound",
                    "message": f"no result image for edit {index}",
                },
            )
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/sessions/{session_id}/ablation")
    def run_ablation(session_id: str, body: EditBody):
        return engine.ablation_run(
            session_id,
            body.selection.to_selection(),
            Shift(body.shift.dx, body.shift.dy),
            body.weights.to_weights() if body.weights else None,
        )

    return app
