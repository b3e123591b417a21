"""Append-only decision log and replay against it.

Records are serialized one JSON object per line with a versioned schema
field. Appends are durable before they return: the line is flushed and
fsynced so a crash after an append never loses the decision the caller is
about to act on.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .backend import UnknownCaseError, VlmBackend
from .cards import CardRepository
from .pipeline import DecisionRecord, RoutingOutcome, route
from .prompts import PromptBuilder, default_prompt_builder


class AuditStoreError(Exception):
    """Base class for audit-store failures."""


class DuplicateRequestIdError(AuditStoreError):
    def __init__(self, request_id: str) -> None:
        super().__init__(f"request_id {request_id!r} already recorded")
        self.request_id = request_id


class RecordNotFoundError(AuditStoreError):
    def __init__(self, request_id: str) -> None:
        super().__init__(f"no record with request_id {request_id!r}")
        self.request_id = request_id


class RepoDigestMismatchError(AuditStoreError):
    def __init__(self, recorded: str, current: str) -> None:
        super().__init__(
            f"record was made against repository digest {recorded[:12]}..., "
            f"current repository is {current[:12]}..."
        )
        self.recorded = recorded
        self.current = current


class FixtureMissingError(AuditStoreError):
    """The scripted backend has no fixture for the recorded case."""


class AuditStore:
    """Append-only JSONL store of decision records with unique request ids."""

    def __init__(self, path: str | Path) -> None:
        self._path = Path(path)
        self._lock = threading.Lock()
        self._known_ids: set[str] | None = None

    @property
    def path(self) -> Path:
        return self._path

    def _load_ids(self) -> set[str]:
        if self._known_ids is None:
            ids: set[str] = set()
            if self._path.exists():
                for record in self._iter_records():
                    ids.add(record.request_id)
            self._known_ids = ids
        return self._known_ids

    def append(self, record: DecisionRecord) -> None:
        """Durably append one record; the fsync lands before this returns."""
        with self._lock:
            known = self._load_ids()
            if record.request_id in known:
                raise DuplicateRequestIdError(record.request_id)
            line = json.dumps(record.to_dict(), ensure_ascii=False, separators=(",", ":"))
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            known.add(record.request_id)

    def _iter_records(self) -> Iterator[DecisionRecord]:
        with open(self._path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise AuditStoreError(f"line {line_no}: invalid JSON: {exc.msg}") from exc
                try:
                    yield DecisionRecord.from_dict(data)
                except (KeyError, ValueError, TypeError) as exc:
                    raise AuditStoreError(f"line {line_no}: bad record: {exc}") from exc

    def records(self) -> list[DecisionRecord]:
        if not self._path.exists():
            return []
        return list(self._iter_records())

    def get(self, request_id: str) -> DecisionRecord:
        for record in self.records():
            if record.request_id == request_id:
                return record
        raise RecordNotFoundError(request_id)

    def tail(self, limit: int) -> list[DecisionRecord]:
        """The most recent ``limit`` records, newest last."""
        if limit <= 0:
            return []
        return self.records()[-limit:]


@dataclass(frozen=True)
class ReplayResult:
    """What re-executing a recorded decision produced, and whether it moved."""

    record: DecisionRecord
    outcome: RoutingOutcome | None
    template_drift: bool
    outcome_drift: bool

    @property
    def drift(self) -> bool:
        return self.template_drift or self.outcome_drift

    @property
    def passed(self) -> bool:
        return not self.drift


def replay(
    store: AuditStore,
    request_id: str,
    repo: CardRepository,
    backend: VlmBackend,
    *,
    prompts: PromptBuilder | None = None,
) -> ReplayResult:
    """Re-execute a recorded decision and compare outcomes.

    The repository must carry the recorded digest (hard error otherwise).
    A changed template version is reported as drift but replay still runs,
    which is possible because scripted fixtures key on case ids rather than
    prompt text. Replay targets scripted backends; the original image is
    not stored, so a live backend would not see the original pixels.
    """
    record = store.get(request_id)
    if repo.source_digest != record.repo_digest:
        raise RepoDigestMismatchError(record.repo_digest, repo.source_digest)
    builder = prompts if prompts is not None else default_prompt_builder()
    template_drift = builder.version != record.template_version
    try:
        outcome, _ = route(
            None,
            record.case_id,
            repo,
            record.thresholds,
            backend,
            abstain_sets=record.abstain_sets_map(),
            prompts=builder,
        )
    except UnknownCaseError as exc:
        raise FixtureMissingError(str(exc)) from exc
    outcome_drift = outcome != record.outcome
    return ReplayResult(
        record=record,
        outcome=outcome,
        template_drift=template_drift,
        outcome_drift=outcome_drift,
    )
