"""Model-card repository: load, validate, and query the routable inventory.

Cards live in a JSONL file, one object per line with exactly the keys
``id``, ``task_caption``, and ``modality``. A loaded repository is an
immutable snapshot tagged with a digest of the source bytes so that audit
records can pin the exact inventory a decision was made against.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

CARD_ID_PATTERN = re.compile(r"MODEL_[0-9]{2,}")

#: Tokens reserved for abstention; no card may claim one as its modality.
RESERVED_TOKENS = frozenset({"none", "normal", "other"})

MAX_CAPTION_LENGTH = 300

_REQUIRED_KEYS = frozenset({"id", "task_caption", "modality"})


class CardError(Exception):
    """Base class for card-repository failures."""


class FileMissingError(CardError):
    def __init__(self, path: Path) -> None:
        super().__init__(f"card file not found: {path}")
        self.path = path


class MalformedRecordError(CardError):
    """A line in the card file failed validation; carries the line number."""

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateIdError(CardError):
    def __init__(self, card_id: str, line_no: int) -> None:
        super().__init__(f"line {line_no}: duplicate card id {card_id!r}")
        self.card_id = card_id
        self.line_no = line_no


class ReservedModalityError(CardError):
    def __init__(self, card_id: str, modality: str, line_no: int | None = None) -> None:
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(
            f"{prefix}card {card_id!r} uses reserved abstention token {modality!r} as its modality"
        )
        self.card_id = card_id
        self.modality = modality
        self.line_no = line_no


@dataclass(frozen=True)
class ModelCard:
    """One routable model card: identity, what it does, what it looks at.

    Field whitespace is trimmed at construction; validation raises
    ``ValueError`` for shape problems and ``ReservedModalityError`` when the
    modality collides with an abstention token.
    """

    id: str
    task_caption: str
    modality: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", self.id.strip())
        object.__setattr__(self, "task_caption", self.task_caption.strip())
        object.__setattr__(self, "modality", self.modality.strip())
        if not CARD_ID_PATTERN.fullmatch(self.id):
            raise ValueError(f"card id {self.id!r} does not match MODEL_ followed by 2+ digits")
        if not self.task_caption:
            raise ValueError(f"card {self.id!r} has an empty task_caption")
        if len(self.task_caption) > MAX_CAPTION_LENGTH:
            raise ValueError(
                f"card {self.id!r} caption exceeds {MAX_CAPTION_LENGTH} characters"
            )
        if not self.modality:
            raise ValueError(f"card {self.id!r} has an empty modality")
        if self.modality.casefold() in RESERVED_TOKENS:
            raise ReservedModalityError(self.id, self.modality)


@dataclass(frozen=True)
class CardRepository:
    """Immutable card inventory in file order, plus the source-byte digest."""

    cards: tuple[ModelCard, ...]
    source_digest: str

    def __len__(self) -> int:
        return len(self.cards)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(card.id for card in self.cards)

    def get(self, card_id: str) -> ModelCard | None:
        for card in self.cards:
            if card.id == card_id:
                return card
        return None


def _parse_line(line_no: int, raw: bytes) -> ModelCard:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRecordError(line_no, f"invalid UTF-8: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise MalformedRecordError(line_no, "record is not a JSON object")
    keys = set(obj)
    missing = _REQUIRED_KEYS - keys
    if missing:
        raise MalformedRecordError(line_no, f"missing keys: {', '.join(sorted(missing))}")
    extra = keys - _REQUIRED_KEYS
    if extra:
        raise MalformedRecordError(line_no, f"unknown keys: {', '.join(sorted(extra))}")
    for key in _REQUIRED_KEYS:
        if not isinstance(obj[key], str):
            raise MalformedRecordError(line_no, f"{key} must be a string")
    try:
        return ModelCard(id=obj["id"], task_caption=obj["task_caption"], modality=obj["modality"])
    except ReservedModalityError as exc:
        raise ReservedModalityError(exc.card_id, exc.modality, line_no) from exc
    except ValueError as exc:
        raise MalformedRecordError(line_no, str(exc)) from exc


def load_repository(path: str | Path) -> CardRepository:
    """Load and strictly validate a JSONL card file.

    Raises FileMissingError, MalformedRecordError (line-anchored),
    DuplicateIdError, or ReservedModalityError. Blank lines are ignored;
    card order follows file order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileMissingError(path)
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()

    cards: list[ModelCard] = []
    seen: dict[str, int] = {}
    for line_no, raw in enumerate(data.split(b"\n"), start=1):
        if not raw.strip():
            continue
        card = _parse_line(line_no, raw)
        if card.id in seen:
            raise DuplicateIdError(card.id, line_no)
        seen[card.id] = line_no
        cards.append(card)
    return CardRepository(cards=tuple(cards), source_digest=digest)


def serialize_repository(repo: CardRepository) -> bytes:
    """Render the repository back to canonical JSONL bytes.

    The form is one object per line with keys in id, task_caption, modality
    order. Loading the serialized bytes yields an equal repository whose
    digest is the digest of these bytes, so serialization is a fixpoint.
    """
    lines = []
    for card in repo.cards:
        lines.append(
            json.dumps(
                {"id": card.id, "task_caption": card.task_caption, "modality": card.modality},
                ensure_ascii=False,
            )
        )
    body = "\n".join(lines)
    if body:
        body += "\n"
    return body.encode("utf-8")


def write_repository(repo: CardRepository, path: str | Path) -> None:
    """Atomically write the canonical serialization to ``path``."""
    path = Path(path)
    data = serialize_repository(repo)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def unique_modalities(repo: CardRepository) -> tuple[str, ...]:
    """Distinct modalities in first-appearance order.

    Deduplication is case-insensitive; the casing of the first occurrence
    is kept for display and prompting.
    """
    seen: set[str] = set()
    out: list[str] = []
    for card in repo.cards:
        key = card.modality.casefold()
        if key not in seen:
            seen.add(key)
            out.append(card.modality)
    return tuple(out)


def candidates_for_modality(repo: CardRepository, modality: str) -> tuple[tuple[str, str], ...]:
    """All (id, task_caption) pairs whose modality matches, in file order.

    Matching is whitespace-trimmed and case-insensitive.
    """
    wanted = modality.strip().casefold()
    return tuple(
        (card.id, card.task_caption)
        for card in repo.cards
        if card.modality.casefold() == wanted
    )
