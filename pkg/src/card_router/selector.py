"""Top-2 answer arbitration with a calibrated cutoff and explicit abstention.

Given the two leading decoded answers for a stage, the arbiter keeps the
top answer unless the runner-up clears the stage cutoff with a genuinely
different answer, in which case the runner-up is promoted. The stage then
terminates exactly when the chosen answer is an abstention token for that
stage. The cutoff is only ever compared against the runner-up probability;
the top answer is never thresholded.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

ABSTAIN_NONE = "None"
ABSTAIN_NORMAL = "Normal"
ABSTAIN_OTHER = "Other"

#: Every token the engine ever treats as an abstention.
ABSTAIN_TOKENS = frozenset({ABSTAIN_NONE, ABSTAIN_NORMAL, ABSTAIN_OTHER})

#: Single shared abstain set; pass it for every stage to get one-set behavior.
GLOBAL_ABSTAIN_SET = ABSTAIN_TOKENS


class InsufficientCandidatesError(Exception):
    """Fewer than two ranked candidates were available for arbitration."""


class InvalidProbabilityError(ValueError):
    """A candidate probability fell outside [0, 1]."""


def answer_key(text: str) -> str:
    """Comparison key for decoded answers: whitespace-trimmed and case-folded."""
    return text.strip().casefold()


def canonical_abstain_token(text: str) -> str | None:
    """Map an answer onto its canonical abstention token, or None if it is not one."""
    key = answer_key(text)
    for token in ABSTAIN_TOKENS:
        if key == token.casefold():
            return token
    return None


class Verdict(str, Enum):
    PROCEED = "proceed"
    TERMINATE = "terminate"


class Reason(str, Enum):
    TOP_KEPT = "top_kept"
    RUNNER_UP_PROMOTED = "runner_up_promoted"
    ABSTAIN_CHOSEN = "abstain_chosen"


@dataclass(frozen=True)
class CandidateAnswer:
    """A decoded answer paired with its first-token probability.

    ``text`` is expected in canonical form (see normalize_answer in the
    pipeline module). The empty sentinel appears only on protocol-anomaly
    paths, where the pipeline records what the backend said before failing
    closed.
    """

    text: str
    first_token_prob: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.first_token_prob <= 1.0:
            raise InvalidProbabilityError(
                f"first_token_prob {self.first_token_prob!r} outside [0, 1]"
            )


@dataclass(frozen=True)
class SelectorConfig:
    """Per-stage arbitration settings: the cutoff and the abstention vocabulary."""

    cutoff: float
    abstain_set: frozenset[str]

    def __post_init__(self) -> None:
        if not 0.0 <= self.cutoff <= 1.0:
            raise ValueError(f"cutoff {self.cutoff!r} outside [0, 1]")
        canonical = []
        for token in self.abstain_set:
            match = canonical_abstain_token(token)
            if match is None:
                raise ValueError(f"abstain token {token!r} is not one of {sorted(ABSTAIN_TOKENS)}")
            canonical.append(match)
        if not canonical:
            raise ValueError("abstain_set must not be empty")
        object.__setattr__(self, "abstain_set", frozenset(canonical))

    def is_abstention(self, text: str) -> bool:
        token = canonical_abstain_token(text)
        return token is not None and token in self.abstain_set


@dataclass(frozen=True)
class SelectorDecision:
    """The arbitration result for one stage."""

    chosen: CandidateAnswer
    verdict: Verdict
    reason: Reason


def top2(candidates: Sequence[CandidateAnswer]) -> tuple[CandidateAnswer, CandidateAnswer]:
    """First two entries of a probability-descending candidate list.

    Ties keep input order. Raises InsufficientCandidatesError on short
    input and ValueError when the leading pair is out of order.
    """
    if len(candidates) < 2:
        raise InsufficientCandidatesError(
            f"need at least two candidates, got {len(candidates)}"
        )
    first, second = candidates[0], candidates[1]
    if first.first_token_prob < second.first_token_prob:
        raise ValueError("candidates are not sorted by first_token_prob descending")
    return first, second


def arbitrate(
    top: CandidateAnswer, runner_up: CandidateAnswer, config: SelectorConfig
) -> SelectorDecision:
    """Choose between the top answer and the runner-up, then decide termination.

    The runner-up is promoted iff its probability is at or above the cutoff
    (inclusive comparison) and its text differs from the top answer under
    the canonical comparison key. The verdict is TERMINATE iff the chosen
    text is in the stage's abstain set.
    """
    if top.first_token_prob < runner_up.first_token_prob:
        raise ValueError("top candidate has lower probability than runner-up")
    chosen = top
    promoted = False
    if runner_up.first_token_prob >= config.cutoff and answer_key(runner_up.text) != answer_key(
        top.text
    ):
        chosen = runner_up
        promoted = True
    terminates = config.is_abstention(chosen.text)
    if promoted:
        reason = Reason.RUNNER_UP_PROMOTED
    elif terminates:
        reason = Reason.ABSTAIN_CHOSEN
    else:
        reason = Reason.TOP_KEPT
    return SelectorDecision(
        chosen=chosen,
        verdict=Verdict.TERMINATE if terminates else Verdict.PROCEED,
        reason=reason,
    )


def normalize_abstain_set(tokens: Iterable[str]) -> frozenset[str]:
    """Canonicalize an iterable of abstain tokens, rejecting unknown ones."""
    return SelectorConfig(cutoff=0.0, abstain_set=frozenset(tokens)).abstain_set
