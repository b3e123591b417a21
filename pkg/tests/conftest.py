from pathlib import Path

import pytest

from card_router.backend import ScriptedBackend, load_script
from card_router.calibration import load_labeled_cases
from card_router.cards import CardRepository, load_repository
from card_router.prompts import PromptBuilder

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def cards_path() -> Path:
    return DATA_DIR / "cards.jsonl"


@pytest.fixture(scope="session")
def script_path() -> Path:
    return DATA_DIR / "backend_script.jsonl"


@pytest.fixture(scope="session")
def cases_path() -> Path:
    return DATA_DIR / "labeled_cases.jsonl"


@pytest.fixture(scope="session")
def repo(cards_path: Path) -> CardRepository:
    return load_repository(cards_path)


@pytest.fixture()
def backend(script_path: Path) -> ScriptedBackend:
    # Fresh per test so call logs never leak between tests.
    return load_script(script_path)


@pytest.fixture(scope="session")
def labeled_cases(cases_path: Path):
    return load_labeled_cases(cases_path)


@pytest.fixture(scope="session")
def builder() -> PromptBuilder:
    return PromptBuilder()
