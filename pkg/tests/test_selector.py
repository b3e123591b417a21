import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from card_router.selector import (
    ABSTAIN_NONE,
    ABSTAIN_NORMAL,
    ABSTAIN_OTHER,
    GLOBAL_ABSTAIN_SET,
    CandidateAnswer,
    InsufficientCandidatesError,
    InvalidProbabilityError,
    Reason,
    SelectorConfig,
    SelectorDecision,
    Verdict,
    answer_key,
    arbitrate,
    canonical_abstain_token,
    top2,
)

CFG = SelectorConfig(cutoff=0.30, abstain_set=frozenset({ABSTAIN_NONE}))


def test_runner_up_below_cutoff_keeps_top():
    decision = arbitrate(CandidateAnswer("Liver cancer", 0.55), CandidateAnswer("Kidney stone", 0.28), CFG)
    assert decision.chosen.text == "Liver cancer"
    assert decision.reason is Reason.TOP_KEPT
    assert decision.verdict is Verdict.PROCEED


def test_cutoff_is_inclusive():
    decision = arbitrate(CandidateAnswer("Liver cancer", 0.55), CandidateAnswer("Kidney stone", 0.30), CFG)
    assert decision.chosen.text == "Kidney stone"
    assert decision.reason is Reason.RUNNER_UP_PROMOTED
    assert decision.verdict is Verdict.PROCEED


def test_top_probability_is_never_thresholded():
    # Top at 0.05 is far below the cutoff but still wins when the runner-up
    # does not qualify.
    decision = arbitrate(CandidateAnswer("Polyp", 0.05), CandidateAnswer("Ulcer", 0.04), CFG)
    assert decision.chosen.text == "Polyp"
    assert decision.reason is Reason.TOP_KEPT


def test_equal_text_blocks_promotion():
    decision = arbitrate(CandidateAnswer("Pneumonia", 0.50), CandidateAnswer("  pneumonia ", 0.45), CFG)
    assert decision.chosen.text == "Pneumonia"
    assert decision.reason is Reason.TOP_KEPT


def test_promoted_abstention_reports_promotion_not_abstention():
    decision = arbitrate(CandidateAnswer("Colonoscopy", 0.50), CandidateAnswer("None", 0.31), CFG)
    assert decision.chosen.text == "None"
    assert decision.verdict is Verdict.TERMINATE
    assert decision.reason is Reason.RUNNER_UP_PROMOTED


def test_abstaining_top_reports_abstain_chosen():
    decision = arbitrate(CandidateAnswer("None", 0.90), CandidateAnswer("Colonoscopy", 0.03), CFG)
    assert decision.verdict is Verdict.TERMINATE
    assert decision.reason is Reason.ABSTAIN_CHOSEN


def test_termination_respects_stage_abstain_set():
    # "Normal" terminates only where the stage's vocabulary says so.
    stage2 = SelectorConfig(cutoff=0.30, abstain_set=frozenset({ABSTAIN_NORMAL}))
    top = CandidateAnswer("normal", 0.80)
    runner = CandidateAnswer("Pneumonia", 0.10)
    assert arbitrate(top, runner, stage2).verdict is Verdict.TERMINATE
    assert arbitrate(top, runner, CFG).verdict is Verdict.PROCEED


def test_abstention_match_is_casefolded():
    decision = arbitrate(CandidateAnswer("NONE", 0.9), CandidateAnswer("CT", 0.01), CFG)
    assert decision.verdict is Verdict.TERMINATE


def test_out_of_order_pair_rejected():
    with pytest.raises(ValueError):
        arbitrate(CandidateAnswer("a", 0.1), CandidateAnswer("b", 0.2), CFG)


def test_top2_validation():
    with pytest.raises(InsufficientCandidatesError):
        top2([CandidateAnswer("a", 0.5)])
    with pytest.raises(ValueError):
        top2([CandidateAnswer("a", 0.1), CandidateAnswer("b", 0.2)])
    first, second = top2(
        [CandidateAnswer("a", 0.5), CandidateAnswer("b", 0.3), CandidateAnswer("c", 0.1)]
    )
    assert (first.text, second.text) == ("a", "b")


def test_probability_bounds():
    with pytest.raises(InvalidProbabilityError):
        CandidateAnswer("a", 1.5)
    with pytest.raises(InvalidProbabilityError):
        CandidateAnswer("a", -0.1)


def test_config_canonicalizes_tokens():
    config = SelectorConfig(cutoff=0.1, abstain_set=frozenset({" none ", "OTHER"}))
    assert config.abstain_set == frozenset({ABSTAIN_NONE, ABSTAIN_OTHER})
    assert config.is_abstention("oThEr")
    assert not config.is_abstention("Normal")


def test_config_rejects_unknown_or_empty_sets():
    with pytest.raises(ValueError):
        SelectorConfig(cutoff=0.1, abstain_set=frozenset({"Unsure"}))
    with pytest.raises(ValueError):
        SelectorConfig(cutoff=0.1, abstain_set=frozenset())
    with pytest.raises(ValueError):
        SelectorConfig(cutoff=1.5, abstain_set=frozenset({ABSTAIN_NONE}))


def test_canonical_abstain_token():
    assert canonical_abstain_token(" none") == ABSTAIN_NONE
    assert canonical_abstain_token("NORMAL") == ABSTAIN_NORMAL
    assert canonical_abstain_token("Cyst") is None
    assert GLOBAL_ABSTAIN_SET == frozenset({ABSTAIN_NONE, ABSTAIN_NORMAL, ABSTAIN_OTHER})


_texts = st.one_of(
    st.sampled_from(["None", "Normal", "Other", "none ", " NORMAL", "Pneumonia", "CT", "a b"]),
    st.text(min_size=0, max_size=12),
)
_probs = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@st.composite
def _pairs(draw):
    p1 = draw(_probs)
    p2 = draw(st.floats(min_value=0.0, max_value=p1, allow_nan=False))
    return (
        CandidateAnswer(draw(_texts), p1),
        CandidateAnswer(draw(_texts), p2),
        draw(_probs),
        draw(st.sets(st.sampled_from(["None", "Normal", "Other"]), min_size=1, max_size=3)),
    )


@settings(max_examples=300)
@given(_pairs())
def test_arbitration_invariants(case):
    top, runner, cutoff, tokens = case
    config = SelectorConfig(cutoff=cutoff, abstain_set=frozenset(tokens))
    decision = arbitrate(top, runner, config)
    # Chosen is always one of the two inputs.
    assert decision.chosen in (top, runner)
    # Promotion happens exactly under the published condition.
    should_promote = runner.first_token_prob >= cutoff and answer_key(runner.text) != answer_key(top.text)
    assert (decision.chosen is runner) == should_promote
    # Termination tracks membership of the chosen answer, nothing else.
    assert (decision.verdict is Verdict.TERMINATE) == config.is_abstention(decision.chosen.text)
    # Reason precedence: promotion dominates, then abstention, then default.
    if should_promote:
        assert decision.reason is Reason.RUNNER_UP_PROMOTED
    elif decision.verdict is Verdict.TERMINATE:
        assert decision.reason is Reason.ABSTAIN_CHOSEN
    else:
        assert decision.reason is Reason.TOP_KEPT


@settings(max_examples=200)
@given(_pairs())
def test_raising_cutoff_never_creates_promotion(case):
    top, runner, cutoff, tokens = case
    config_low = SelectorConfig(cutoff=cutoff, abstain_set=frozenset(tokens))
    higher = min(1.0, cutoff + 0.1)
    config_high = SelectorConfig(cutoff=higher, abstain_set=frozenset(tokens))
    promoted_low = arbitrate(top, runner, config_low).chosen is runner
    promoted_high = arbitrate(top, runner, config_high).chosen is runner
    assert promoted_high <= promoted_low
