import pytest

from commacloud.detector import CommaDetector
from commacloud.synth import SynthConfig, generate_corpus

SMALL_CORPUS = SynthConfig(height=192, width=384, duration_hours=48, side_range=(112.0, 150.0), seed=5)


def quick_detector(**kw):
    params = dict(n_batches=10, n_rounds=10, max_patch_samples=120)
    params.update(kw)
    return CommaDetector(**params)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SMALL_CORPUS)


@pytest.fixture(scope="session")
def small_fit(small_corpus):
    det = quick_detector().fit(small_corpus.frames, small_corpus.labels)
    return det, small_corpus


# one pass/fail line per acceptance criterion at the end of the run
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA.setdefault(name, ("PASS" if report.passed else "FAIL", detail))
        if report.failed:
            _CRITERIA[name] = ("FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        verdict, detail = _CRITERIA[name]
        number = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
