"""HTTP surface over the routing pipeline.

Every successful or failed routing run is appended to the audit store,
durably, before the response leaves the process.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fastapi import FastAPI, File, Form, HTTPException, UploadFile

from .audit import AuditStore, RecordNotFoundError
from .backend import (
    BackendError,
    ScriptedBackend,
    UnknownCaseError,
    VlmBackend,
    load_script,
)
from .cards import CardRepository, load_repository
from .pipeline import InvalidThresholdsError, Thresholds, route
from .prompts import PromptBuilder, default_prompt_builder
from .remote import RemoteBackend, RemoteConfig

DEFAULT_MAX_IMAGE_BYTES = 20 * 1024 * 1024
DEFAULT_DECISIONS_LIMIT = 20


@dataclass
class ServiceConfig:
    """Service settings, loadable from a JSON file."""

    cards_path: str
    audit_path: str
    backend: dict[str, Any]
    thresholds: Thresholds = field(default_factory=Thresholds)
    host: str = "127.0.0.1"
    port: int = 8787
    max_image_bytes: int = DEFAULT_MAX_IMAGE_BYTES
    template_dir: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        for key in ("cards_path", "audit_path", "backend"):
            if key not in data:
                raise ValueError(f"config is missing {key!r}")
        thresholds = (
            Thresholds.from_dict(data["thresholds"]) if "thresholds" in data else Thresholds()
        )
        return cls(
            cards_path=data["cards_path"],
            audit_path=data["audit_path"],
            backend=data["backend"],
            thresholds=thresholds,
            host=data.get("host", "127.0.0.1"),
            port=data.get("port", 8787),
            max_image_bytes=data.get("max_image_bytes", DEFAULT_MAX_IMAGE_BYTES),
            template_dir=data.get("template_dir"),
        )

    def build_backend(self) -> VlmBackend:
        kind = self.backend.get("kind")
        if kind == "scripted":
            return load_script(self.backend["script_path"])
        if kind == "remote":
            return RemoteBackend(
                RemoteConfig(
                    base_url=self.backend["base_url"],
                    model=self.backend["model"],
                    timeout=self.backend.get("timeout", 60.0),
                    in_flight_limit=self.backend.get("in_flight_limit", 4),
                )
            )
        raise ValueError(f"unknown backend kind {kind!r}")


class ServiceState:
    """Live service wiring; the repository snapshot is swappable atomically."""

    def __init__(
        self,
        config: ServiceConfig,
        *,
        repo: CardRepository | None = None,
        backend: VlmBackend | None = None,
        store: AuditStore | None = None,
        prompts: PromptBuilder | None = None,
    ) -> None:
        self.config = config
        self._repo = repo if repo is not None else load_repository(config.cards_path)
        self.backend = backend if backend is not None else config.build_backend()
        self.store = store if store is not None else AuditStore(config.audit_path)
        if prompts is not None:
            self.prompts = prompts
        elif config.template_dir:
            self.prompts = PromptBuilder(config.template_dir)
        else:
            self.prompts = default_prompt_builder()
        self._reload_lock = threading.Lock()

    @property
    def repo(self) -> CardRepository:
        return self._repo

    def reload_repository(self) -> CardRepository:
        """Re-read the card file and swap the snapshot in one assignment."""
        with self._reload_lock:
            fresh = load_repository(self.config.cards_path)
            self._repo = fresh
            return fresh


def _parse_tau(name: str, raw: str | None) -> float | None:
    if raw is None or raw == "":
        return None
    try:
        value = float(raw)
    except ValueError:
        raise HTTPException(status_code=400, detail=f"{name} must be a number, got {raw!r}")
    if not 0.0 <= value <= 1.0:
        raise HTTPException(status_code=400, detail=f"{name} must be within [0, 1], got {value}")
    return value


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="card-router", version="0.1.0")
    app.state.router_state = state

    @app.post("/v1/route")
    def post_route(
        image: UploadFile | None = File(default=None),
        case_id: str | None = Form(default=None),
        tau1: str | None = Form(default=None),
        tau2: str | None = Form(default=None),
        tau3: str | None = Form(default=None),
    ) -> dict[str, Any]:
        overrides = {
            "tau1": _parse_tau("tau1", tau1),
            "tau2": _parse_tau("tau2", tau2),
            "tau3": _parse_tau("tau3", tau3),
        }
        base = state.config.thresholds
        try:
            thresholds = Thresholds(
                tau1=overrides["tau1"] if overrides["tau1"] is not None else base.tau1,
                tau2=overrides["tau2"] if overrides["tau2"] is not None else base.tau2,
                tau3=overrides["tau3"] if overrides["tau3"] is not None else base.tau3,
            )
        except InvalidThresholdsError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

        image_bytes: bytes | None = None
        if image is not None:
            image_bytes = image.file.read()
            if len(image_bytes) > state.config.max_image_bytes:
                raise HTTPException(
                    status_code=413,
                    detail=f"image exceeds {state.config.max_image_bytes} bytes",
                )
            if not image_bytes:
                image_bytes = None

        scripted = isinstance(state.backend, ScriptedBackend)
        if scripted and not case_id:
            raise HTTPException(
                status_code=400, detail="case_id is required with a scripted backend"
            )
        if not scripted and image_bytes is None:
            raise HTTPException(
                status_code=400, detail="an image is required for stages 1 and 2"
            )

        try:
            outcome, record = route(
                image_bytes,
                case_id,
                state.repo,
                thresholds,
                state.backend,
                prompts=state.prompts,
            )
        except UnknownCaseError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except BackendError as exc:
            partial = getattr(exc, "decision_record", None)
            if partial is not None:
                state.store.append(partial)
            raise HTTPException(status_code=502, detail=f"backend failure: {exc}")
        # The audit line must be durable before the caller hears the answer.
        state.store.append(record)
        return {"outcome": outcome.to_dict(), "decision_record": record.to_dict()}

    @app.get("/v1/cards")
    def get_cards() -> dict[str, Any]:
        repo = state.repo
        return {
            "digest": repo.source_digest,
            "cards": [
                {"id": card.id, "task_caption": card.task_caption, "modality": card.modality}
                for card in repo.cards
            ],
        }

    @app.get("/v1/decisions")
    def get_decisions(limit: int = DEFAULT_DECISIONS_LIMIT) -> dict[str, Any]:
        if limit < 1:
            raise HTTPException(status_code=400, detail="limit must be at least 1")
        records = state.store.tail(limit)
        return {"records": [record.to_dict() for record in records]}

    @app.get("/v1/decisions/{request_id}")
    def get_decision(request_id: str) -> dict[str, Any]:
        try:
            record = state.store.get(request_id)
        except RecordNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return record.to_dict()

    @app.get("/healthz")
    def healthz() -> dict[str, Any]:
        return {
            "status": "ok",
            "backend_reachable": state.backend.healthcheck(),
            "cards": len(state.repo),
        }

    return app
