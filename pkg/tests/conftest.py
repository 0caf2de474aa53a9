import pytest
import torch

from radspan.schema import default_schema
from radspan.synth import GrammarConfig, generate

torch.set_num_threads(1)

# filled by test_acceptance.py; printed once at the end of the session
CRITERIA_RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_RESULTS):
        passed, detail = CRITERIA_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} -- {detail}")


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def corpus100(schema):
    docs, book = generate(GrammarConfig(), 100, schema)
    return docs, book
