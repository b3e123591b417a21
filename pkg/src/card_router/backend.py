"""Backend contract: first-token ranking plus constrained decoding.

A stage interaction is two transport round-trips. The ranking call returns
the first-token distribution and, as a side effect of the greedy pass that
produced it, the full answer for the top-ranked token; that answer is held
in a cache so decoding the top token costs nothing extra. Decoding any
other token forces a second round-trip. Implementations count round-trips
under exactly this accounting so instrumented call totals are comparable
across the scripted and remote backends.

The scripted backend replays JSONL fixtures keyed on (case_id, stage) with
an optional context matcher, which keeps scenario tests stable across
prompt rewording.
"""

from __future__ import annotations

import hashlib
import json
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path


class BackendError(Exception):
    """Base class for backend failures."""


class BackendUnreachableError(BackendError):
    """The backend could not be reached after exhausting retries."""


class ProtocolError(BackendError):
    """The backend answered, but not in the agreed shape."""


class LogprobsUnsupportedError(BackendError):
    """The backend cannot return first-token log-probabilities."""


class UnknownFirstTokenError(BackendError):
    """A decode was requested for a token the ranking never returned."""


class UnknownCaseError(BackendError):
    """The scripted backend has no fixture for the requested case and stage."""


class MalformedScriptError(Exception):
    """A line in a scripted-backend fixture failed validation."""

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class GenerationRequest:
    """One stage's worth of input to the backend.

    ``case_id`` and ``stage`` are routing metadata: the scripted backend
    addresses fixtures with them and audit records correlate on them.
    ``context`` carries structured stage inputs (modality, abnormality) as
    sorted key/value pairs for fixture discrimination. Stage-3 requests
    never carry an image; that is enforced here as well as by the pipeline.
    """

    system_prompt: str
    user_prompt: str
    image: bytes | None = None
    max_answer_tokens: int = 24
    case_id: str | None = None
    stage: int | None = None
    context: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.user_prompt.strip():
            raise ValueError("user_prompt must be non-empty")
        if self.max_answer_tokens < 1:
            raise ValueError("max_answer_tokens must be at least 1")
        if self.stage is not None and self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {self.stage!r}")
        if self.stage == 3 and self.image is not None:
            raise ValueError("stage-3 requests must not carry an image")

    @property
    def context_map(self) -> dict[str, str]:
        return dict(self.context)

    def signature(self) -> str:
        """Stable digest of everything that shapes the model's reply."""
        hasher = hashlib.sha256()
        for part in (
            str(self.stage),
            self.system_prompt,
            self.user_prompt,
            str(self.max_answer_tokens),
        ):
            hasher.update(part.encode("utf-8"))
            hasher.update(b"\x00")
        hasher.update(hashlib.sha256(self.image).digest() if self.image else b"-")
        return hasher.hexdigest()


@dataclass(frozen=True)
class FirstTokenDistribution:
    """Ranked (token, probability) pairs, probabilities descending.

    ``truncated_at`` is the number of entries retained after top-k
    truncation. At least two entries are required so the arbiter always
    has a runner-up.
    """

    entries: tuple[tuple[str, float], ...]
    truncated_at: int

    def __post_init__(self) -> None:
        if len(self.entries) < 2:
            raise ValueError("a first-token distribution needs at least two entries")
        if self.truncated_at != len(self.entries):
            raise ValueError("truncated_at must equal the number of retained entries")
        total = 0.0
        previous = None
        for token, prob in self.entries:
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"probability {prob!r} for token {token!r} outside [0, 1]")
            if previous is not None and prob > previous:
                raise ValueError("entries must be sorted by probability descending")
            previous = prob
            total += prob
        if total > 1.0 + 1e-6:
            raise ValueError(f"retained probabilities sum to {total}, above 1")

    def top_two(self) -> tuple[tuple[str, float], tuple[str, float]]:
        return self.entries[0], self.entries[1]


@dataclass(frozen=True)
class BackendCall:
    """One counted transport round-trip, for instrumentation and audits."""

    kind: str
    case_id: str | None
    stage: int | None
    token: str | None
    has_image: bool


class VlmBackend(ABC):
    """What the routing pipeline needs from a vision-language backend."""

    @property
    @abstractmethod
    def identifier(self) -> str:
        """Stable id written into decision records."""

    @abstractmethod
    def rank_first_tokens(self, request: GenerationRequest, k: int = 5) -> FirstTokenDistribution:
        """Top-k first-token distribution for the request; one round-trip."""

    @abstractmethod
    def decode_with_first_token(self, request: GenerationRequest, first_token: str) -> str:
        """Full answer whose first generated token is ``first_token``.

        ``first_token`` must come from a ranking of the same request. The
        top-ranked token decodes from the greedy pass already paid for by
        the ranking call; any other token costs one more round-trip.
        """

    def healthcheck(self) -> bool:
        return True


@dataclass(frozen=True)
class ScriptRecord:
    entries: tuple[tuple[str, float, str], ...]
    when: tuple[tuple[str, str], ...] = ()

    def matches(self, context: dict[str, str]) -> bool:
        for key, value in self.when:
            got = context.get(key)
            if got is None or got.strip().casefold() != value.strip().casefold():
                return False
        return True


_SCRIPT_KEYS = frozenset({"case_id", "stage", "entries"})
_ENTRY_KEYS = frozenset({"token", "prob", "answer"})


def _parse_script_line(line_no: int, text: str) -> tuple[str, int, ScriptRecord]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedScriptError(line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MalformedScriptError(line_no, "record is not a JSON object")
    keys = set(obj)
    missing = _SCRIPT_KEYS - keys
    if missing:
        raise MalformedScriptError(line_no, f"missing keys: {', '.join(sorted(missing))}")
    extra = keys - _SCRIPT_KEYS - {"when"}
    if extra:
        raise MalformedScriptError(line_no, f"unknown keys: {', '.join(sorted(extra))}")
    case_id = obj["case_id"]
    stage = obj["stage"]
    if not isinstance(case_id, str) or not case_id.strip():
        raise MalformedScriptError(line_no, "case_id must be a non-empty string")
    if not isinstance(stage, int) or stage not in (1, 2, 3):
        raise MalformedScriptError(line_no, "stage must be 1, 2, or 3")
    raw_entries = obj["entries"]
    if not isinstance(raw_entries, list) or len(raw_entries) < 2:
        raise MalformedScriptError(line_no, "entries must be a list with at least two items")
    entries: list[tuple[str, float, str]] = []
    seen_tokens: set[str] = set()
    total = 0.0
    previous: float | None = None
    for item in raw_entries:
        if not isinstance(item, dict) or set(item) != _ENTRY_KEYS:
            raise MalformedScriptError(line_no, "each entry needs exactly token, prob, answer")
        token, prob, answer = item["token"], item["prob"], item["answer"]
        if not isinstance(token, str) or not token:
            raise MalformedScriptError(line_no, "entry token must be a non-empty string")
        if not isinstance(prob, (int, float)) or isinstance(prob, bool) or not 0.0 <= prob <= 1.0:
            raise MalformedScriptError(line_no, f"entry prob {prob!r} outside [0, 1]")
        if not isinstance(answer, str) or not answer:
            raise MalformedScriptError(line_no, "entry answer must be a non-empty string")
        if not answer.startswith(token):
            raise MalformedScriptError(
                line_no, f"answer {answer!r} does not start with its first token {token!r}"
            )
        if token in seen_tokens:
            raise MalformedScriptError(line_no, f"duplicate token {token!r} in entries")
        seen_tokens.add(token)
        if previous is not None and prob > previous:
            raise MalformedScriptError(line_no, "entry probs must be sorted descending")
        previous = float(prob)
        total += float(prob)
        entries.append((token, float(prob), answer))
    if total > 1.0 + 1e-6:
        raise MalformedScriptError(line_no, f"entry probs sum to {total}, above 1")
    when_raw = obj.get("when", {})
    if not isinstance(when_raw, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in when_raw.items()
    ):
        raise MalformedScriptError(line_no, "when must map strings to strings")
    when = tuple(sorted(when_raw.items()))
    return case_id, stage, ScriptRecord(entries=tuple(entries), when=when)


class ScriptedBackend(VlmBackend):
    """Deterministic backend that replays fixture distributions and answers.

    Fixtures are JSONL records of {case_id, stage, entries, when?} where
    entries hold {token, prob, answer} triples sorted by prob descending.
    Lookup is by (case_id, stage); when several records share that key,
    the one whose ``when`` pairs all match the request context wins, most
    specific first. Requests outside the script raise UnknownCaseError.
    """

    def __init__(self, records: dict[tuple[str, int], list[ScriptRecord]], source_digest: str):
        self._records = records
        self._digest = source_digest
        self._lock = threading.Lock()
        self._log: list[BackendCall] = []

    @property
    def identifier(self) -> str:
        return f"scripted:{self._digest[:12]}"

    @property
    def calls(self) -> tuple[BackendCall, ...]:
        """Every counted round-trip so far, in order."""
        with self._lock:
            return tuple(self._log)

    @property
    def round_trips(self) -> int:
        with self._lock:
            return len(self._log)

    def reset_log(self) -> None:
        with self._lock:
            self._log.clear()

    def _record_call(self, kind: str, request: GenerationRequest, token: str | None) -> None:
        entry = BackendCall(
            kind=kind,
            case_id=request.case_id,
            stage=request.stage,
            token=token,
            has_image=request.image is not None,
        )
        with self._lock:
            self._log.append(entry)

    def _find(self, request: GenerationRequest) -> ScriptRecord:
        if request.case_id is None or request.stage is None:
            raise UnknownCaseError("request carries no case_id/stage for scripted addressing")
        group = self._records.get((request.case_id, request.stage))
        if not group:
            raise UnknownCaseError(
                f"no fixture for case {request.case_id!r} stage {request.stage}"
            )
        context = request.context_map
        applicable = [rec for rec in group if rec.matches(context)]
        if not applicable:
            raise UnknownCaseError(
                f"no fixture for case {request.case_id!r} stage {request.stage} "
                f"matches context {context!r}"
            )
        applicable.sort(key=lambda rec: len(rec.when), reverse=True)
        if len(applicable) > 1 and len(applicable[0].when) == len(applicable[1].when):
            raise ProtocolError(
                f"ambiguous fixtures for case {request.case_id!r} stage {request.stage}"
            )
        return applicable[0]

    def rank_first_tokens(self, request: GenerationRequest, k: int = 5) -> FirstTokenDistribution:
        if k < 2:
            raise ValueError(f"k must be at least 2, got {k}")
        record = self._find(request)
        self._record_call("rank", request, None)
        retained = record.entries[:k]
        return FirstTokenDistribution(
            entries=tuple((token, prob) for token, prob, _ in retained),
            truncated_at=len(retained),
        )

    def decode_with_first_token(self, request: GenerationRequest, first_token: str) -> str:
        record = self._find(request)
        for position, (token, _, answer) in enumerate(record.entries):
            if token == first_token:
                if position > 0:
                    # The greedy pass only covered the top token; anything
                    # else is a forced decode and counts as a round-trip.
                    self._record_call("decode", request, first_token)
                return answer
        raise UnknownFirstTokenError(
            f"token {first_token!r} was never ranked for case {request.case_id!r} "
            f"stage {request.stage}"
        )


def load_script(path: str | Path) -> ScriptedBackend:
    """Load and validate a scripted-backend fixture file.

    Raises MalformedScriptError with the offending line number, including
    for colliding (case_id, stage, when) keys.
    """
    path = Path(path)
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    records: dict[tuple[str, int], list[ScriptRecord]] = {}
    seen: set[tuple[str, int, tuple[tuple[str, str], ...]]] = set()
    for line_no, raw in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not raw.strip():
            continue
        case_id, stage, record = _parse_script_line(line_no, raw)
        key = (case_id, stage, record.when)
        if key in seen:
            raise MalformedScriptError(
                line_no, f"duplicate fixture for case {case_id!r} stage {stage}"
            )
        seen.add(key)
        records.setdefault((case_id, stage), []).append(record)
    return ScriptedBackend(records, digest)
