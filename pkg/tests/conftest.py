import pytest

from specbound.model import ToyModelSpec, build_model
from specbound.training import build_trained_model

_ACCEPTANCE: list[tuple[str, bool, str]] = []


class CriterionRecorder:
    """Records one pass/fail line per acceptance criterion."""

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def check(self, ok: bool, detail: str = "") -> None:
        self.detail = detail
        _ACCEPTANCE.append((self.name, bool(ok), detail))
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return CriterionRecorder(marker.args[0] if marker else request.node.name)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")


@pytest.fixture(scope="session")
def default_model():
    return build_model(ToyModelSpec())


@pytest.fixture(scope="session")
def oracle_model(default_model):
    return default_model.with_head_mode("oracle")


@pytest.fixture(scope="session")
def trained_model():
    model, _ = build_trained_model()
    return model

