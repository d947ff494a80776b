import json
from pathlib import Path

import jsonschema
import pytest

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def _registry():
    from referencing import Registry, Resource

    resources = []
    for path in SCHEMA_DIR.glob("*.json"):
        doc = json.loads(path.read_text())
        resources.append((doc["$id"], Resource.from_contents(doc)))
    return Registry().with_resources(resources)


@pytest.fixture(scope="session")
def validate():
    """validate(name, instance): check ``instance`` against docs/schemas/<name>.v1.json."""
    registry = _registry()

    def check(name, instance):
        schema = json.loads((SCHEMA_DIR / f"{name}.v1.json").read_text())
        jsonschema.Draft202012Validator(schema, registry=registry).validate(instance)

    return check


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """report(criterion, ok, message): print and remember one acceptance result line."""

    def report(criterion, ok, message):
        line = f"ACCEPTANCE {criterion:<4} {'PASS' if ok else 'FAIL'}  {message}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
