"""Three-stage routing: modality, primary abnormality, model-card id.

Each stage ranks first tokens, decodes the two leading candidates, and
hands them to the cutoff arbiter. Termination at any stage yields an
abstention; a stage-3 selection is parsed for a card id among the offered
candidates. Every run emits a DecisionRecord pinning the inputs, the
per-stage evidence, and the final outcome tightly enough for later replay.
"""

from __future__ import annotations

import dataclasses
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Mapping

from .backend import BackendError, GenerationRequest, ProtocolError, VlmBackend
from .cards import CARD_ID_PATTERN, CardRepository, candidates_for_modality, unique_modalities
from .prompts import PromptBuilder, StagePrompt, default_prompt_builder
from .selector import (
    ABSTAIN_NONE,
    ABSTAIN_NORMAL,
    ABSTAIN_OTHER,
    ABSTAIN_TOKENS,
    CandidateAnswer,
    Reason,
    SelectorConfig,
    SelectorDecision,
    Verdict,
    answer_key,
    arbitrate,
    canonical_abstain_token,
    top2,
)

SCHEMA_VERSION = 1

DEFAULT_TAU1 = 0.10
DEFAULT_TAU2 = 0.30
DEFAULT_TAU3 = 0.025

DEFAULT_TOP_K = 5

#: Stage-specific abstention vocabularies: a non-scan or unlisted modality at
#: stage 1, a disease-free scan at stage 2, no matching card at stage 3.
DEFAULT_ABSTAIN_SETS: Mapping[int, frozenset[str]] = {
    1: frozenset({ABSTAIN_NONE, ABSTAIN_OTHER}),
    2: frozenset({ABSTAIN_NORMAL}),
    3: frozenset({ABSTAIN_NONE}),
}

#: Sentinel prompt digest for the defensive no-candidates stage-3 path.
SKIPPED_STAGE_DIGEST = "skipped:no-candidates"

_TRAILING_PUNCTUATION = ".,;:!"
_JUSTIFICATION_SEPARATORS = "-—–:;,. "


class InvalidThresholdsError(ValueError):
    """A stage cutoff fell outside [0, 1]."""


@dataclass(frozen=True)
class Thresholds:
    """The three stage cutoffs; defaults are the calibrated operating point."""

    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2
    tau3: float = DEFAULT_TAU3

    def __post_init__(self) -> None:
        for name in ("tau1", "tau2", "tau3"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidThresholdsError(f"{name} {value!r} outside [0, 1]")

    def for_stage(self, stage: int) -> float:
        return (self.tau1, self.tau2, self.tau3)[stage - 1]

    def to_dict(self) -> dict[str, float]:
        return {"tau1": self.tau1, "tau2": self.tau2, "tau3": self.tau3}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Thresholds":
        return cls(tau1=data["tau1"], tau2=data["tau2"], tau3=data["tau3"])


class OutcomeKind:
    SELECTED = "selected"
    ABSTAINED = "abstained"


@dataclass(frozen=True)
class RoutingOutcome:
    """Terminal result: a card was selected, or a stage abstained with a token."""

    kind: str
    card_id: str | None = None
    stage: int | None = None
    token: str | None = None

    def __post_init__(self) -> None:
        if self.kind == OutcomeKind.SELECTED:
            if not self.card_id or self.stage is not None or self.token is not None:
                raise ValueError("selected outcomes carry a card_id and nothing else")
        elif self.kind == OutcomeKind.ABSTAINED:
            if self.card_id is not None or self.stage not in (1, 2, 3):
                raise ValueError("abstained outcomes carry a stage in 1..3 and no card_id")
            if self.token not in ABSTAIN_TOKENS:
                raise ValueError(f"abstention token {self.token!r} is not canonical")
        else:
            raise ValueError(f"unknown outcome kind {self.kind!r}")

    @classmethod
    def selected(cls, card_id: str) -> "RoutingOutcome":
        return cls(kind=OutcomeKind.SELECTED, card_id=card_id)

    @classmethod
    def abstained(cls, stage: int, token: str) -> "RoutingOutcome":
        return cls(kind=OutcomeKind.ABSTAINED, stage=stage, token=token)

    def __str__(self) -> str:
        if self.kind == OutcomeKind.SELECTED:
            return f"Selected {self.card_id}"
        return f"Abstained at Stage {self.stage} ({self.token})"

    def to_dict(self) -> dict[str, Any]:
        if self.kind == OutcomeKind.SELECTED:
            return {"kind": self.kind, "card_id": self.card_id}
        return {"kind": self.kind, "stage": self.stage, "token": self.token}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoutingOutcome":
        if data["kind"] == OutcomeKind.SELECTED:
            return cls.selected(data["card_id"])
        return cls.abstained(data["stage"], data["token"])


@dataclass(frozen=True)
class StageOutcome:
    """Everything one stage contributed to the decision.

    ``ranked_tokens`` keeps the full top-k token ranking so near-miss
    candidates stay visible in the audit trail even though only two are
    decoded and arbitrated.
    """

    stage: int
    prompt_digest: str
    ranked_tokens: tuple[tuple[str, float], ...]
    top2: tuple[CandidateAnswer, CandidateAnswer]
    decision: SelectorDecision
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "prompt_digest": self.prompt_digest,
            "ranked_tokens": [[token, prob] for token, prob in self.ranked_tokens],
            "top2": [
                {"text": c.text, "first_token_prob": c.first_token_prob} for c in self.top2
            ],
            "decision": {
                "chosen": {
                    "text": self.decision.chosen.text,
                    "first_token_prob": self.decision.chosen.first_token_prob,
                },
                "verdict": self.decision.verdict.value,
                "reason": self.decision.reason.value,
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageOutcome":
        chosen = data["decision"]["chosen"]
        return cls(
            stage=data["stage"],
            prompt_digest=data["prompt_digest"],
            ranked_tokens=tuple((token, prob) for token, prob in data["ranked_tokens"]),
            top2=tuple(
                CandidateAnswer(text=c["text"], first_token_prob=c["first_token_prob"])
                for c in data["top2"]
            ),
            decision=SelectorDecision(
                chosen=CandidateAnswer(
                    text=chosen["text"], first_token_prob=chosen["first_token_prob"]
                ),
                verdict=Verdict(data["decision"]["verdict"]),
                reason=Reason(data["decision"]["reason"]),
            ),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass(frozen=True)
class DecisionRecord:
    """The replayable audit record for one routing run."""

    request_id: str
    timestamp: str
    case_id: str | None
    repo_digest: str
    template_version: str
    backend_id: str
    thresholds: Thresholds
    abstain_sets: tuple[tuple[int, tuple[str, ...]], ...]
    stages: tuple[StageOutcome, ...]
    outcome: RoutingOutcome | None
    justification: str | None = None
    error: str | None = None

    def abstain_sets_map(self) -> dict[int, frozenset[str]]:
        return {stage: frozenset(tokens) for stage, tokens in self.abstain_sets}

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SCHEMA_VERSION,
            "request_id": self.request_id,
            "timestamp": self.timestamp,
            "case_id": self.case_id,
            "repo_digest": self.repo_digest,
            "template_version": self.template_version,
            "backend_id": self.backend_id,
            "thresholds": self.thresholds.to_dict(),
            "abstain_sets": {
                str(stage): list(tokens) for stage, tokens in self.abstain_sets
            },
            "stages": [stage.to_dict() for stage in self.stages],
            "outcome": self.outcome.to_dict() if self.outcome else None,
            "justification": self.justification,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DecisionRecord":
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {data.get('schema')!r}")
        return cls(
            request_id=data["request_id"],
            timestamp=data["timestamp"],
            case_id=data["case_id"],
            repo_digest=data["repo_digest"],
            template_version=data["template_version"],
            backend_id=data["backend_id"],
            thresholds=Thresholds.from_dict(data["thresholds"]),
            abstain_sets=tuple(
                (int(stage), tuple(tokens)) for stage, tokens in sorted(data["abstain_sets"].items())
            ),
            stages=tuple(StageOutcome.from_dict(s) for s in data["stages"]),
            outcome=RoutingOutcome.from_dict(data["outcome"]) if data["outcome"] else None,
            justification=data.get("justification"),
            error=data.get("error"),
        )


def normalize_answer(raw: str) -> str:
    """Canonicalize a decoded answer for comparison and parsing.

    Trims, collapses internal whitespace, and strips trailing sentence
    punctuation while preserving casing. An answer that normalizes to the
    empty string is the protocol-anomaly sentinel; route fails closed on it.
    """
    collapsed = " ".join(raw.split())
    return collapsed.rstrip(_TRAILING_PUNCTUATION).strip()


def parse_model_code(answer: str, candidate_ids: Iterable[str]) -> tuple[str, str] | None:
    """Extract the selected card id and justification from a stage-3 answer.

    Only the first id-shaped substring is considered; it must be one of the
    offered candidates, otherwise there is no match. The justification is
    the remaining text with leading separators stripped.
    """
    match = CARD_ID_PATTERN.search(answer)
    if match is None:
        return None
    code = match.group(0)
    if code not in set(candidate_ids):
        return None
    remainder = (answer[: match.start()] + answer[match.end() :]).strip()
    return code, remainder.strip(_JUSTIFICATION_SEPARATORS).strip()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _normalize_abstain_sets(
    overrides: Mapping[int, Iterable[str]] | None,
) -> dict[int, frozenset[str]]:
    sets = {stage: frozenset(tokens) for stage, tokens in DEFAULT_ABSTAIN_SETS.items()}
    if overrides:
        for stage, tokens in overrides.items():
            if stage not in (1, 2, 3):
                raise ValueError(f"abstain-set stage {stage!r} must be 1, 2, or 3")
            sets[stage] = frozenset(tokens)
    return sets


@dataclass
class _StageRun:
    outcome: StageOutcome
    chosen_text: str
    terminated: bool


def _run_stage(
    backend: VlmBackend,
    prompt: StagePrompt,
    config: SelectorConfig,
    request: GenerationRequest,
    top_k: int,
) -> _StageRun:
    distribution = backend.rank_first_tokens(request, k=top_k)
    (token_a, prob_a), (token_b, prob_b) = distribution.top_two()
    answer_a = normalize_answer(backend.decode_with_first_token(request, token_a))
    answer_b = normalize_answer(backend.decode_with_first_token(request, token_b))
    pair = top2([CandidateAnswer(answer_a, prob_a), CandidateAnswer(answer_b, prob_b)])
    decision = arbitrate(pair[0], pair[1], config)
    outcome = StageOutcome(
        stage=prompt.stage,
        prompt_digest=prompt.digest(),
        ranked_tokens=distribution.entries,
        top2=pair,
        decision=decision,
    )
    return _StageRun(
        outcome=outcome,
        chosen_text=decision.chosen.text,
        terminated=decision.verdict is Verdict.TERMINATE,
    )


def _with_warnings(outcome: StageOutcome, warnings: list[str]) -> StageOutcome:
    if not warnings:
        return outcome
    return dataclasses.replace(outcome, warnings=tuple(warnings))


def route(
    image: bytes | None,
    case_id: str | None,
    repo: CardRepository,
    thresholds: Thresholds | None,
    backend: VlmBackend,
    *,
    abstain_sets: Mapping[int, Iterable[str]] | None = None,
    prompts: PromptBuilder | None = None,
    top_k: int = DEFAULT_TOP_K,
    request_id: str | None = None,
    clock: Callable[[], str] = _utc_now,
) -> tuple[RoutingOutcome, DecisionRecord]:
    """Run the full three-stage workflow against one input.

    Returns the terminal outcome plus its decision record. Identical inputs
    produce identical records up to request_id and timestamp. Backend
    failures propagate with the partial record attached to the exception as
    ``decision_record``.
    """
    if not repo.cards:
        raise ValueError("repository has no cards to route against")
    thresholds = thresholds if thresholds is not None else Thresholds()
    sets = _normalize_abstain_sets(abstain_sets)
    configs = {
        stage: SelectorConfig(cutoff=thresholds.for_stage(stage), abstain_set=sets[stage])
        for stage in (1, 2, 3)
    }
    builder = prompts if prompts is not None else default_prompt_builder()

    stages: list[StageOutcome] = []
    justification: str | None = None

    def finish(
        outcome: RoutingOutcome | None, error: str | None = None
    ) -> DecisionRecord:
        return DecisionRecord(
            request_id=request_id or uuid.uuid4().hex,
            timestamp=clock(),
            case_id=case_id,
            repo_digest=repo.source_digest,
            template_version=builder.version,
            backend_id=backend.identifier,
            thresholds=thresholds,
            abstain_sets=tuple(
                (stage, tuple(sorted(sets[stage]))) for stage in (1, 2, 3)
            ),
            stages=tuple(stages),
            outcome=outcome,
            justification=justification,
            error=error,
        )

    def fail_protocol(message: str) -> ProtocolError:
        error = ProtocolError(message)
        error.decision_record = finish(None, error=message)
        return error

    try:
        # Stage 1: which kind of scan is this?
        modalities = unique_modalities(repo)
        prompt1 = builder.build_stage1(modalities)
        request1 = GenerationRequest(
            system_prompt=prompt1.system_prompt,
            user_prompt=prompt1.user_prompt,
            image=image,
            case_id=case_id,
            stage=1,
        )
        run1 = _run_stage(backend, prompt1, configs[1], request1, top_k)
        warnings1: list[str] = []
        if run1.terminated:
            stages.append(run1.outcome)
            token = canonical_abstain_token(run1.chosen_text) or ABSTAIN_OTHER
            outcome = RoutingOutcome.abstained(1, token)
            return outcome, finish(outcome)
        chosen_key = answer_key(run1.chosen_text)
        modality = next((m for m in modalities if m.casefold() == chosen_key), None)
        if modality is None:
            warnings1.append(
                f"stage-1 answer {run1.chosen_text!r} is not an admissible modality; "
                f"coerced to {ABSTAIN_OTHER}"
            )
            stages.append(_with_warnings(run1.outcome, warnings1))
            outcome = RoutingOutcome.abstained(1, ABSTAIN_OTHER)
            return outcome, finish(outcome)
        stages.append(run1.outcome)

        # Stage 2: what is the primary abnormality?
        prompt2 = builder.build_stage2(modality)
        request2 = GenerationRequest(
            system_prompt=prompt2.system_prompt,
            user_prompt=prompt2.user_prompt,
            image=image,
            case_id=case_id,
            stage=2,
            context=(("modality", modality),),
        )
        run2 = _run_stage(backend, prompt2, configs[2], request2, top_k)
        if run2.terminated:
            stages.append(run2.outcome)
            token = canonical_abstain_token(run2.chosen_text) or ABSTAIN_NORMAL
            outcome = RoutingOutcome.abstained(2, token)
            return outcome, finish(outcome)
        if not run2.chosen_text:
            stages.append(
                _with_warnings(run2.outcome, ["stage-2 answer empty after normalization"])
            )
            raise fail_protocol("stage-2 answer empty after normalization")
        abnormality = run2.chosen_text
        stages.append(run2.outcome)

        # Stage 3: which card covers this modality and abnormality?
        candidates = candidates_for_modality(repo, modality)
        if not candidates:
            # Defensive: admissible modalities come from the repository, so
            # this is unreachable through stage 1, but the audit trail still
            # gets a truthful terminal entry if invariants break upstream.
            synthetic = CandidateAnswer(ABSTAIN_NONE, 1.0)
            stages.append(
                StageOutcome(
                    stage=3,
                    prompt_digest=SKIPPED_STAGE_DIGEST,
                    ranked_tokens=((ABSTAIN_NONE, 1.0), (ABSTAIN_NONE, 0.0)),
                    top2=(synthetic, CandidateAnswer(ABSTAIN_NONE, 0.0)),
                    decision=SelectorDecision(
                        chosen=synthetic,
                        verdict=Verdict.TERMINATE,
                        reason=Reason.ABSTAIN_CHOSEN,
                    ),
                    warnings=(
                        f"no candidate cards for modality {modality!r}; stage 3 skipped "
                        "without a backend call",
                    ),
                )
            )
            outcome = RoutingOutcome.abstained(3, ABSTAIN_NONE)
            return outcome, finish(outcome)
        prompt3 = builder.build_stage3(modality, abnormality, candidates)
        request3 = GenerationRequest(
            system_prompt=prompt3.system_prompt,
            user_prompt=prompt3.user_prompt,
            image=None,
            case_id=case_id,
            stage=3,
            context=(("abnormality", abnormality), ("modality", modality)),
        )
        run3 = _run_stage(backend, prompt3, configs[3], request3, top_k)
        if run3.terminated:
            stages.append(run3.outcome)
            token = canonical_abstain_token(run3.chosen_text) or ABSTAIN_NONE
            outcome = RoutingOutcome.abstained(3, token)
            return outcome, finish(outcome)
        if not run3.chosen_text:
            stages.append(
                _with_warnings(run3.outcome, ["stage-3 answer empty after normalization"])
            )
            raise fail_protocol("stage-3 answer empty after normalization")
        parsed = parse_model_code(run3.chosen_text, (cid for cid, _ in candidates))
        if parsed is None:
            stages.append(
                _with_warnings(
                    run3.outcome,
                    [
                        f"stage-3 answer {run3.chosen_text!r} names no offered card id; "
                        "abstaining"
                    ],
                )
            )
            outcome = RoutingOutcome.abstained(3, ABSTAIN_NONE)
            return outcome, finish(outcome)
        card_id, justification = parsed
        stages.append(run3.outcome)
        outcome = RoutingOutcome.selected(card_id)
        return outcome, finish(outcome)
    except BackendError as exc:
        if not hasattr(exc, "decision_record"):
            exc.decision_record = finish(None, error=str(exc))
        raise
