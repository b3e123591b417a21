"""Model-card routing engine: staged visual questioning with calibrated abstention."""

from .audit import (
    AuditStore,
    AuditStoreError,
    DuplicateRequestIdError,
    FixtureMissingError,
    RecordNotFoundError,
    RepoDigestMismatchError,
    ReplayResult,
    replay,
)
from .backend import (
    BackendCall,
    BackendError,
    BackendUnreachableError,
    FirstTokenDistribution,
    GenerationRequest,
    LogprobsUnsupportedError,
    MalformedScriptError,
    ProtocolError,
    ScriptedBackend,
    UnknownCaseError,
    UnknownFirstTokenError,
    VlmBackend,
    load_script,
)
from .calibration import (
    CalibrationReport,
    CaseFileError,
    GridTooLargeError,
    LabeledCase,
    MemoizingBackend,
    MetricsRow,
    evaluate,
    load_labeled_cases,
    pick_best_row,
    sweep,
    write_report_csv,
    write_report_json,
)
from .cards import (
    CardError,
    CardRepository,
    DuplicateIdError,
    FileMissingError,
    MalformedRecordError,
    ModelCard,
    ReservedModalityError,
    candidates_for_modality,
    load_repository,
    serialize_repository,
    unique_modalities,
    write_repository,
)
from .pipeline import (
    DEFAULT_ABSTAIN_SETS,
    DEFAULT_TAU1,
    DEFAULT_TAU2,
    DEFAULT_TAU3,
    DecisionRecord,
    InvalidThresholdsError,
    OutcomeKind,
    RoutingOutcome,
    StageOutcome,
    Thresholds,
    normalize_answer,
    parse_model_code,
    route,
)
from .prompts import PromptBuilder, StagePrompt, default_prompt_builder
from .remote import RemoteBackend, RemoteConfig
from .selector import (
    ABSTAIN_NONE,
    ABSTAIN_NORMAL,
    ABSTAIN_OTHER,
    GLOBAL_ABSTAIN_SET,
    CandidateAnswer,
    Reason,
    SelectorConfig,
    SelectorDecision,
    Verdict,
    answer_key,
    arbitrate,
    top2,
)
from .service import ServiceConfig, ServiceState, create_app

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN_NONE",
    "ABSTAIN_NORMAL",
    "ABSTAIN_OTHER",
    "AuditStore",
    "AuditStoreError",
    "BackendCall",
    "BackendError",
    "BackendUnreachableError",
    "CalibrationReport",
    "CandidateAnswer",
    "CardError",
    "CardRepository",
    "CaseFileError",
    "DEFAULT_ABSTAIN_SETS",
    "DEFAULT_TAU1",
    "DEFAULT_TAU2",
    "DEFAULT_TAU3",
    "DecisionRecord",
    "DuplicateIdError",
    "DuplicateRequestIdError",
    "FileMissingError",
    "FirstTokenDistribution",
    "FixtureMissingError",
    "GLOBAL_ABSTAIN_SET",
    "GenerationRequest",
    "GridTooLargeError",
    "InvalidThresholdsError",
    "LabeledCase",
    "LogprobsUnsupportedError",
    "MalformedRecordError",
    "MalformedScriptError",
    "MemoizingBackend",
    "MetricsRow",
    "ModelCard",
    "OutcomeKind",
    "PromptBuilder",
    "ProtocolError",
    "Reason",
    "RecordNotFoundError",
    "RemoteBackend",
    "RemoteConfig",
    "RepoDigestMismatchError",
    "ReplayResult",
    "ReservedModalityError",
    "RoutingOutcome",
    "ScriptedBackend",
    "SelectorConfig",
    "SelectorDecision",
    "ServiceConfig",
    "ServiceState",
    "StageOutcome",
    "StagePrompt",
    "Thresholds",
    "UnknownCaseError",
    "UnknownFirstTokenError",
    "Verdict",
    "VlmBackend",
    "answer_key",
    "arbitrate",
    "candidates_for_modality",
    "create_app",
    "default_prompt_builder",
    "evaluate",
    "load_labeled_cases",
    "load_repository",
    "load_script",
    "normalize_answer",
    "parse_model_code",
    "pick_best_row",
    "replay",
    "route",
    "serialize_repository",
    "sweep",
    "top2",
    "unique_modalities",
    "write_report_csv",
    "write_report_json",
    "write_repository",
]
