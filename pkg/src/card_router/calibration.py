"""Threshold calibration: score labeled cases and sweep cutoff grids.

Thresholds only change post-hoc arbitration, never what the backend is
asked, so a sweep wraps the backend in a memo keyed on the request itself
and pays for each distinct (case, stage) interaction exactly once no
matter how many grid rows reuse it.
"""

from __future__ import annotations

import csv
import itertools
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backend import (
    BackendError,
    FirstTokenDistribution,
    GenerationRequest,
    VlmBackend,
)
from .cards import CardRepository
from .pipeline import OutcomeKind, RoutingOutcome, Thresholds, route
from .prompts import PromptBuilder
from .selector import ABSTAIN_TOKENS

DEFAULT_FALSE_SELECTION_CEILING = 0.05
DEFAULT_GRID_CAP = 1000

_CASE_KEYS = frozenset({"case_id", "expected_kind", "expected_id", "expected_token", "expected_stage"})

_CSV_COLUMNS = (
    "tau1",
    "tau2",
    "tau3",
    "selection_accuracy",
    "false_selection_rate",
    "abstention_precision",
    "abstention_recall",
    "n_cases",
    "n_errors",
)


class GridTooLargeError(Exception):
    """The Cartesian product of the sweep axes exceeded the row cap."""


class CaseFileError(Exception):
    """A labeled-case line failed validation; carries the line number."""

    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class LabeledCase:
    """One scripted case with its ground-truth outcome.

    ``expected_token`` and ``expected_stage`` are optional refinements that
    only strict matching looks at; the default mode scores outcome kind
    and, for selections, the card id.
    """

    case_id: str
    expected_kind: str
    expected_id: str | None = None
    expected_token: str | None = None
    expected_stage: int | None = None

    def __post_init__(self) -> None:
        if self.expected_kind == OutcomeKind.SELECTED:
            if not self.expected_id:
                raise ValueError(f"case {self.case_id!r}: selected label needs expected_id")
            if self.expected_token or self.expected_stage:
                raise ValueError(f"case {self.case_id!r}: selected label carries abstention fields")
        elif self.expected_kind == OutcomeKind.ABSTAINED:
            if self.expected_id:
                raise ValueError(f"case {self.case_id!r}: abstained label carries expected_id")
            if self.expected_token is not None and self.expected_token not in ABSTAIN_TOKENS:
                raise ValueError(
                    f"case {self.case_id!r}: expected_token {self.expected_token!r} not canonical"
                )
            if self.expected_stage is not None and self.expected_stage not in (1, 2, 3):
                raise ValueError(f"case {self.case_id!r}: expected_stage must be 1, 2, or 3")
        else:
            raise ValueError(f"case {self.case_id!r}: unknown expected_kind {self.expected_kind!r}")

    def matches(self, outcome: RoutingOutcome, *, strict: bool = False) -> bool:
        if outcome.kind != self.expected_kind:
            return False
        if outcome.kind == OutcomeKind.SELECTED:
            return outcome.card_id == self.expected_id
        if not strict:
            return True
        if self.expected_token is not None and outcome.token != self.expected_token:
            return False
        if self.expected_stage is not None and outcome.stage != self.expected_stage:
            return False
        return True


def load_labeled_cases(path: str | Path) -> tuple[LabeledCase, ...]:
    """Parse a JSONL file of labeled cases with line-anchored diagnostics."""
    path = Path(path)
    cases: list[LabeledCase] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").split("\n"), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CaseFileError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise CaseFileError(line_no, "record is not a JSON object")
        extra = set(obj) - _CASE_KEYS
        if extra:
            raise CaseFileError(line_no, f"unknown keys: {', '.join(sorted(extra))}")
        if "case_id" not in obj or "expected_kind" not in obj:
            raise CaseFileError(line_no, "case_id and expected_kind are required")
        try:
            case = LabeledCase(
                case_id=obj["case_id"],
                expected_kind=obj["expected_kind"],
                expected_id=obj.get("expected_id"),
                expected_token=obj.get("expected_token"),
                expected_stage=obj.get("expected_stage"),
            )
        except ValueError as exc:
            raise CaseFileError(line_no, str(exc)) from exc
        if case.case_id in seen:
            raise CaseFileError(line_no, f"duplicate case_id {case.case_id!r}")
        seen.add(case.case_id)
        cases.append(case)
    return tuple(cases)


@dataclass(frozen=True)
class MetricsRow:
    """Scores for one threshold triple over the labeled set."""

    tau1: float
    tau2: float
    tau3: float
    selection_accuracy: float
    false_selection_rate: float
    abstention_precision: float
    abstention_recall: float
    n_cases: int
    n_errors: int
    errors: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau1": self.tau1,
            "tau2": self.tau2,
            "tau3": self.tau3,
            "selection_accuracy": self.selection_accuracy,
            "false_selection_rate": self.false_selection_rate,
            "abstention_precision": self.abstention_precision,
            "abstention_recall": self.abstention_recall,
            "n_cases": self.n_cases,
            "n_errors": self.n_errors,
            "errors": [[case_id, message] for case_id, message in self.errors],
        }


def _ratio(numerator: int, denominator: int, *, empty: float) -> float:
    if denominator == 0:
        return empty
    return numerator / denominator


def evaluate(
    cases: Sequence[LabeledCase],
    thresholds: Thresholds,
    repo: CardRepository,
    backend: VlmBackend,
    *,
    prompts: PromptBuilder | None = None,
    abstain_sets: Mapping[int, Iterable[str]] | None = None,
    strict: bool = False,
    top_k: int = 5,
) -> MetricsRow:
    """Route every labeled case at one threshold triple and score the results.

    Cases whose backend interaction fails are flagged in ``errors`` and
    excluded from the rates; the paired 0/0 denominators report 1.0
    (vacuous success) and an all-errored set scores 0.0 accuracy.
    """
    known_ids = set(repo.ids)
    for case in cases:
        if case.expected_id is not None and case.expected_id not in known_ids:
            raise ValueError(
                f"case {case.case_id!r}: expected id {case.expected_id!r} is not in the repository"
            )
    errors: list[tuple[str, str]] = []
    matched = 0
    false_selections = 0
    true_abstentions = 0
    predicted_abstentions = 0
    expected_abstentions = 0
    for case in cases:
        try:
            outcome, _ = route(
                None,
                case.case_id,
                repo,
                thresholds,
                backend,
                abstain_sets=abstain_sets,
                prompts=prompts,
                top_k=top_k,
            )
        except BackendError as exc:
            errors.append((case.case_id, str(exc)))
            continue
        if case.matches(outcome, strict=strict):
            matched += 1
        if case.expected_kind == OutcomeKind.ABSTAINED:
            expected_abstentions += 1
            if outcome.kind == OutcomeKind.SELECTED:
                false_selections += 1
        if outcome.kind == OutcomeKind.ABSTAINED:
            predicted_abstentions += 1
            if case.expected_kind == OutcomeKind.ABSTAINED:
                true_abstentions += 1
    scored = len(cases) - len(errors)
    return MetricsRow(
        tau1=thresholds.tau1,
        tau2=thresholds.tau2,
        tau3=thresholds.tau3,
        selection_accuracy=_ratio(matched, scored, empty=0.0),
        false_selection_rate=_ratio(false_selections, scored, empty=0.0),
        abstention_precision=_ratio(true_abstentions, predicted_abstentions, empty=1.0),
        abstention_recall=_ratio(true_abstentions, expected_abstentions, empty=1.0),
        n_cases=len(cases),
        n_errors=len(errors),
        errors=tuple(errors),
    )


class MemoizingBackend(VlmBackend):
    """Caches rank and decode results per distinct request.

    Keys include the request signature (stage, prompts, image) so prompt
    changes invalidate naturally; thresholds never enter the key because
    they never reach the backend.
    """

    def __init__(self, inner: VlmBackend) -> None:
        self._inner = inner
        self._lock = threading.Lock()
        self._rank_cache: dict[tuple[str | None, int | None, str, int], FirstTokenDistribution] = {}
        self._decode_cache: dict[tuple[str | None, int | None, str, str], str] = {}

    @property
    def identifier(self) -> str:
        return self._inner.identifier

    def healthcheck(self) -> bool:
        return self._inner.healthcheck()

    def rank_first_tokens(self, request: GenerationRequest, k: int = 5) -> FirstTokenDistribution:
        key = (request.case_id, request.stage, request.signature(), k)
        with self._lock:
            if key in self._rank_cache:
                return self._rank_cache[key]
        value = self._inner.rank_first_tokens(request, k)
        with self._lock:
            self._rank_cache.setdefault(key, value)
        return value

    def decode_with_first_token(self, request: GenerationRequest, first_token: str) -> str:
        key = (request.case_id, request.stage, request.signature(), first_token)
        with self._lock:
            if key in self._decode_cache:
                return self._decode_cache[key]
        value = self._inner.decode_with_first_token(request, first_token)
        with self._lock:
            self._decode_cache.setdefault(key, value)
        return value


@dataclass(frozen=True)
class CalibrationReport:
    """Every grid row in Cartesian-product order, plus the winning row."""

    rows: tuple[MetricsRow, ...]
    best_row: MetricsRow | None
    false_selection_ceiling: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "false_selection_ceiling": self.false_selection_ceiling,
            "rows": [row.to_dict() for row in self.rows],
            "best_row": self.best_row.to_dict() if self.best_row else None,
        }


def pick_best_row(
    rows: Sequence[MetricsRow], *, ceiling: float = DEFAULT_FALSE_SELECTION_CEILING
) -> MetricsRow | None:
    """Highest selection accuracy subject to the false-selection ceiling.

    Ties prefer higher abstention precision, then the lexicographically
    smallest (tau1, tau2, tau3). None when no row is feasible.
    """
    feasible = [row for row in rows if row.false_selection_rate <= ceiling]
    if not feasible:
        return None
    return min(
        feasible,
        key=lambda row: (
            -row.selection_accuracy,
            -row.abstention_precision,
            (row.tau1, row.tau2, row.tau3),
        ),
    )


def sweep(
    cases: Sequence[LabeledCase],
    grid: tuple[Sequence[float], Sequence[float], Sequence[float]],
    repo: CardRepository,
    backend: VlmBackend,
    *,
    prompts: PromptBuilder | None = None,
    abstain_sets: Mapping[int, Iterable[str]] | None = None,
    strict: bool = False,
    top_k: int = 5,
    cap: int = DEFAULT_GRID_CAP,
    ceiling: float = DEFAULT_FALSE_SELECTION_CEILING,
) -> CalibrationReport:
    """Evaluate every threshold triple in the grid's Cartesian product.

    Rows come back in product order (tau1 outermost). The grid size is
    capped; the backend is shared through a memo so each distinct request
    is issued once for the whole sweep.
    """
    tau1s, tau2s, tau3s = grid
    size = len(tau1s) * len(tau2s) * len(tau3s)
    if size == 0:
        raise ValueError("each grid axis needs at least one value")
    if size > cap:
        raise GridTooLargeError(f"grid has {size} rows, above the cap of {cap}")
    memo = MemoizingBackend(backend)
    rows = [
        evaluate(
            cases,
            Thresholds(tau1=a, tau2=b, tau3=c),
            repo,
            memo,
            prompts=prompts,
            abstain_sets=abstain_sets,
            strict=strict,
            top_k=top_k,
        )
        for a, b, c in itertools.product(tau1s, tau2s, tau3s)
    ]
    return CalibrationReport(
        rows=tuple(rows),
        best_row=pick_best_row(rows, ceiling=ceiling),
        false_selection_ceiling=ceiling,
    )


def write_report_csv(report: CalibrationReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([getattr(row, column) for column in _CSV_COLUMNS])


def write_report_json(report: CalibrationReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
