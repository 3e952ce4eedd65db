import pytest

from evofam.core import BetaProfile, CoefficientFamily, TimeGrid, TimeProfile


def family(alpha=("constant", {"c": 1.0}), beta=("zero", {}), T=1.0):
    a = TimeProfile.make(alpha[0], **alpha[1])
    b = BetaProfile.make(beta[0], **beta[1])
    return CoefficientFamily(a, b, float(T))


CONST = ("constant", {"c": 1.0})
AFFINE = ("affine", {"a": 1.0, "b": 0.5})
XI = ("separable", {"g": {"family": "constant", "params": {"c": 1.0}}, "p": [0.0, 1.0]})
XI_SMALL = ("separable", {"g": {"family": "constant", "params": {"c": 0.1}}, "p": [0.0, 1.0]})


def config_doc(**overrides):
    doc = {
        "T": 1.0,
        "N": 8,
        "M": 100,
        "alpha": {"family": "constant", "params": {"c": 1.0}},
        "beta": {"family": "zero", "params": {}},
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def grid():
    return TimeGrid(1.0, 100)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for the acceptance summary."""

    def record(code, passed, detail):
        line = f"{code} {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[code] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for code in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[code])
