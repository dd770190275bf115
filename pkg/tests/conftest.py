from __future__ import annotations

import json
from pathlib import Path

import pytest

from semtype.llm import MockBackend, MockScript
from semtype.ontology import parse_serialized

ROOT = Path(__file__).resolve().parent.parent
MINI = ROOT / "fixtures" / "mini"

# Event-listing ontology: four superclasses under PROPERTY.
EVENT_LINES = [
    "PROPERTY",
    "PROPERTY::EVENT_INFO",
    "PROPERTY::EVENT_INFO::TITLE",
    "PROPERTY::EVENT_INFO::DURATION",
    "PROPERTY::EVENT_INFO::STARTDATE",
    "PROPERTY::LOCATION",
    "PROPERTY::LOCATION::LAT",
    "PROPERTY::LOCATION::LONG",
    "PROPERTY::LOCATION::ZIP",
    "PROPERTY::LOCATION::CITY",
    "PROPERTY::LOCATION::STATE",
    "PROPERTY::CONTACT_DETAILS",
    "PROPERTY::CONTACT_DETAILS::PHONE_NUMBER",
    "PROPERTY::CONTACT_DETAILS::WEBSITE",
    "PROPERTY::CONTACT_DETAILS::EMAIL",
    "PROPERTY::MISC",
    "PROPERTY::MISC::RATING",
    "PROPERTY::MISC::TOTAL_NUMBER_OF_RATINGS",
]


@pytest.fixture
def event_ontology():
    return parse_serialized(EVENT_LINES)


@pytest.fixture
def mini_dir():
    return MINI


@pytest.fixture
def mini_expected():
    return json.loads((MINI / "golden" / "expected.json").read_text())


@pytest.fixture
def mini_backend():
    return MockBackend(MockScript.load(MINI / "script.yaml"))


_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))
    elif report.when == "setup" and report.skipped and "test_acceptance" in report.nodeid:
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], "skipped"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{status:<8} {name}")
