"""End-to-end gate over the shipped fixtures.

One test per promised behavior. Each prints a single PASS or FAIL line
(visible under -s) and fails the normal pytest way, so a -v run reads as a
scoreboard. Timing bounds are asserted where stated.
"""

import itertools
import random
import time
from contextlib import contextmanager

import pytest

from card_router.audit import AuditStore, RepoDigestMismatchError, replay
from card_router.backend import load_script
from card_router.calibration import evaluate, load_labeled_cases, sweep
from card_router.cards import CardError, load_repository, write_repository
from card_router.pipeline import (
    DEFAULT_TAU1,
    DEFAULT_TAU2,
    DEFAULT_TAU3,
    OutcomeKind,
    SKIPPED_STAGE_DIGEST,
    Thresholds,
    route,
)
from card_router.prompts import TEMPLATE_NAMES, PromptBuilder
from card_router.selector import CandidateAnswer, Reason, SelectorConfig, Verdict, arbitrate
from card_router.service import ServiceConfig

ALL_CASES = (
    "fig2_renal",
    "fig3_histopath",
    "fig3_cxr",
    "nonmedical_cat",
    "term1_blurry",
    "normal_cxr",
    "polyp_colon",
    "pneumonia_cxr",
    "retina_dr",
    "mri_unlisted",
    "derm_unlisted",
    "histo_nomatch",
    "badcode_colon",
)

PNG_BYTES = b"\x89PNG\r\n\x1a\n" + b"\x00" * 16


@contextmanager
def _scored(label: str):
    try:
        yield
    except BaseException:
        print(f"{label}: FAIL")
        raise
    print(f"{label}: PASS")


def _reference_arbitration(a1, p1, a2, p2, tau, abstain_set):
    """Line-by-line transcription of the two-candidate rule, kept independent
    of the selector module on purpose."""

    def key(text):
        return text.strip().casefold()

    chosen, promoted = a1, False
    if p2 >= tau and key(a2) != key(a1):
        chosen, promoted = a2, True
    terminates = any(key(chosen) == key(token) for token in abstain_set)
    if promoted:
        reason = "runner_up_promoted"
    elif terminates:
        reason = "abstain_chosen"
    else:
        reason = "top_kept"
    return chosen, terminates, reason


def test_check1_selector_matches_independent_transcription():
    rng = random.Random(20260821)
    texts = [
        "None", "Normal", "Other", " none", "NORMAL ", "other",
        "Pneumonia", "Kidney stone", "Liver cancer", "Cardiomegaly",
        "MODEL_01", "MODEL_08 - kidney stones", "Chest X-ray",
    ]
    abstain_choices = [
        frozenset({"None"}),
        frozenset({"Normal"}),
        frozenset({"Other"}),
        frozenset({"None", "Other"}),
        frozenset({"None", "Normal", "Other"}),
    ]
    trials = 10_000
    mismatches = 0
    started = time.perf_counter()
    for _ in range(trials):
        a1 = rng.choice(texts)
        a2 = a1 if rng.random() < 0.25 else rng.choice(texts)
        p1 = rng.random()
        p2 = rng.uniform(0.0, p1)
        tau = rng.choice((rng.random(), p2, min(1.0, p2 + 1e-9), 0.0, 1.0))
        abstain = rng.choice(abstain_choices)
        decision = arbitrate(
            CandidateAnswer(a1, p1),
            CandidateAnswer(a2, p2),
            SelectorConfig(cutoff=tau, abstain_set=abstain),
        )
        expected = _reference_arbitration(a1, p1, a2, p2, tau, abstain)
        got = (
            decision.chosen.text,
            decision.verdict is Verdict.TERMINATE,
            decision.reason.value,
        )
        if got != expected:
            mismatches += 1
    elapsed = time.perf_counter() - started
    with _scored("check 1, selector equivalence on 10000 randomized inputs"):
        assert mismatches == 0
        assert elapsed < 5.0, f"took {elapsed:.2f}s"


def test_check2_default_cutoffs_are_the_calibrated_values():
    with _scored("check 2, default cutoffs 0.10 / 0.30 / 0.025"):
        assert (DEFAULT_TAU1, DEFAULT_TAU2, DEFAULT_TAU3) == (0.10, 0.30, 0.025)
        defaults = Thresholds()
        assert (defaults.tau1, defaults.tau2, defaults.tau3) == (0.10, 0.30, 0.025)
        assert defaults.to_dict() == {"tau1": 0.10, "tau2": 0.30, "tau3": 0.025}
        service = ServiceConfig(cards_path="x", audit_path="y", backend={})
        assert service.thresholds == defaults


def test_check3_stage2_cutoff_flips_the_renal_case(repo, script_path, labeled_cases):
    started = time.perf_counter()
    cautious, _ = route(None, "fig2_renal", repo, Thresholds(), load_script(script_path))
    eager, _ = route(
        None, "fig2_renal", repo, Thresholds(tau2=0.10), load_script(script_path)
    )
    elapsed = time.perf_counter() - started
    label = next(c for c in labeled_cases if c.case_id == "fig2_renal")
    with _scored("check 3, tau2 flip between abstention and a wrong selection"):
        assert str(cautious) == "Abstained at Stage 3 (None)"
        assert str(eager) == "Selected MODEL_08"
        # The labeled expectation is abstention, so the flipped selection
        # is exactly the wrong-id hazard the cutoff guards against.
        assert label.expected_kind == OutcomeKind.ABSTAINED
        assert eager.kind == OutcomeKind.SELECTED
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_check4_confident_and_promoted_selections(repo, script_path):
    started = time.perf_counter()
    confident, confident_record = route(
        None, "fig3_histopath", repo, Thresholds(), load_script(script_path)
    )
    promoted, promoted_record = route(
        None, "fig3_cxr", repo, Thresholds(), load_script(script_path)
    )
    elapsed = time.perf_counter() - started
    with _scored("check 4, high-confidence and runner-up-promoted selections"):
        assert str(confident) == "Selected MODEL_01"
        assert [s.decision.reason for s in confident_record.stages] == [Reason.TOP_KEPT] * 3
        assert str(promoted) == "Selected MODEL_13"
        stage3 = promoted_record.stages[2]
        assert stage3.decision.reason is Reason.RUNNER_UP_PROMOTED
        assert stage3.top2[1].first_token_prob >= 0.025
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_check5_truncated_records_and_call_counts(repo, script_path):
    expectations = (("nonmedical_cat", 1), ("normal_cxr", 2), ("histo_nomatch", 3))
    with _scored("check 5, early termination truncates records and calls"):
        for case_id, stages in expectations:
            backend = load_script(script_path)
            outcome, record = route(None, case_id, repo, Thresholds(), backend)
            assert outcome.kind == OutcomeKind.ABSTAINED
            assert outcome.stage == stages
            assert len(record.stages) == stages
            skipped = any(
                s.prompt_digest == SKIPPED_STAGE_DIGEST for s in record.stages
            )
            assert backend.round_trips == 2 * stages - (1 if skipped else 0)
            assert not skipped


def test_check6_stage3_requests_carry_no_image(repo, script_path):
    backend = load_script(script_path)
    reached_stage3 = 0
    for case_id in ALL_CASES:
        _, record = route(PNG_BYTES, case_id, repo, Thresholds(), backend)
        if len(record.stages) == 3 and record.stages[2].prompt_digest != SKIPPED_STAGE_DIGEST:
            reached_stage3 += 1
    with _scored("check 6, the deciding stage is blind to the image"):
        assert reached_stage3 >= 8
        stage3_calls = [c for c in backend.calls if c.stage == 3]
        assert stage3_calls
        assert all(not c.has_image for c in stage3_calls)
        # Earlier stages did see the attachment, so the mask is real.
        assert all(c.has_image for c in backend.calls if c.stage in (1, 2))


def test_check7_sweep_equals_independent_runs(repo, script_path, cases_path):
    grid = ((0.09, 0.10, 0.12), (0.30, 0.35, 0.40), (0.02, 0.025, 0.03))
    cases = load_labeled_cases(cases_path)
    raw = load_script(script_path)
    started = time.perf_counter()
    report = sweep(cases, grid, repo, raw)
    elapsed = time.perf_counter() - started

    independent = tuple(
        evaluate(cases, Thresholds(a, b, c), repo, load_script(script_path))
        for a, b, c in itertools.product(*grid)
    )
    pair_counts: dict[tuple[str, int], int] = {}
    for call in raw.calls:
        pair_counts[(call.case_id, call.stage)] = (
            pair_counts.get((call.case_id, call.stage), 0) + 1
        )
    with _scored("check 7, memoized sweep is row-identical to 27 plain runs"):
        assert len(report.rows) == 27
        assert report.rows == independent
        # Every distinct (case, stage) pair costs one rank and one decode,
        # regardless of how many grid rows revisit it.
        assert raw.round_trips == 54
        assert len(pair_counts) == 27
        assert set(pair_counts.values()) == {2}
        assert elapsed < 10.0, f"took {elapsed:.2f}s"


def test_check8_replay_is_deterministic_and_drift_aware(repo, script_path, tmp_path, cards_path):
    store = AuditStore(tmp_path / "audit.jsonl")
    backend = load_script(script_path)
    records = []
    for case_id in ALL_CASES:
        _, record = route(None, case_id, repo, Thresholds(), backend)
        store.append(record)
        records.append(record)

    with _scored("check 8, every record replays identically and drift is caught"):
        for record in records:
            result = replay(store, record.request_id, repo, load_script(script_path))
            assert result.passed
            assert result.outcome == record.outcome

        lines = cards_path.read_text(encoding="utf-8").splitlines()
        trimmed_path = tmp_path / "trimmed_cards.jsonl"
        trimmed_path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(RepoDigestMismatchError):
            replay(
                store, records[0].request_id, load_repository(trimmed_path),
                load_script(script_path),
            )

        import importlib.resources as resources

        override = tmp_path / "templates"
        override.mkdir()
        src = resources.files("card_router").joinpath("templates")
        for name in TEMPLATE_NAMES:
            (override / name).write_text(
                src.joinpath(name).read_text(encoding="utf-8"), encoding="utf-8"
            )
        (override / "stage1_user.txt").write_text(
            (override / "stage1_user.txt").read_text(encoding="utf-8") + "\nHurry.",
            encoding="utf-8",
        )
        drifted = replay(
            store, records[0].request_id, repo, load_script(script_path),
            prompts=PromptBuilder(override),
        )
        assert drifted.template_drift
        assert not drifted.passed


def test_check9_card_file_round_trip_and_rejections(repo, cards_path, data_dir, tmp_path):
    with _scored("check 9, card round-trip is digest-stable and bad files are refused"):
        out_path = tmp_path / "rewritten.jsonl"
        write_repository(repo, out_path)
        rewritten = load_repository(out_path)
        assert rewritten.source_digest == repo.source_digest
        assert rewritten.cards == repo.cards

        again_path = tmp_path / "rewritten_again.jsonl"
        write_repository(rewritten, again_path)
        assert again_path.read_bytes() == out_path.read_bytes()

        with pytest.raises(CardError) as dup:
            load_repository(data_dir / "bad_cards_duplicate.jsonl")
        assert "line 3" in str(dup.value)

        with pytest.raises(CardError) as reserved:
            load_repository(data_dir / "bad_cards_reserved.jsonl")
        assert "line 2" in str(reserved.value)
