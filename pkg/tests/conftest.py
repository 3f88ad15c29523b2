import copy
import re

import pytest

from ticsnn.harness.config import ExperimentConfig

TINY = {
    "dataset": {"classes": 2, "train": 48, "test": 24, "image_shape": [1, 8, 8],
                "background": 0.0, "contrast": 1.0},
    "network": {"hidden": [8], "timesteps": 3},
    "optimizer": {"epochs": 2, "lr": 0.1, "batch_size": 16},
    "fisher": {"every": 1, "subset": 8},
    "robustness": {"alphas": [0.01], "corruptions": [{"kind": "gaussian", "ratio": 0.5},
                                                      {"kind": "fgsm", "eps": 0.03}]},
    "pruning": {"cycles": 2, "retrain_epochs": 1, "retrain_timesteps": ["full", "tic", 1]},
    "ablation": {"axis": "learning_rate", "values": [0.05, 0.1]},
    "capacity": {"small": [4], "large": [16], "timesteps": [1, 2]},
    "seeds": [0],
}


@pytest.fixture
def tiny_data():
    """Config dict for runs that finish in well under a second."""
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg(tiny_data):
    return ExperimentConfig.model_validate(tiny_data)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per numbered criterion, plus
# supplementary end-to-end checks
# ---------------------------------------------------------------------------

_CRITERION = re.compile(r"test_(?:criterion_(\d+)|supplementary_(\w+))")
_outcomes, _notes = {}, {}


def _key(match):
    return (0, int(match.group(1))) if match.group(1) else (1, match.group(2))


@pytest.fixture
def note(request):
    """Attach a one-line result summary to the running criterion."""
    match = _CRITERION.search(request.node.name)

    def write(text):
        if match:
            _notes[_key(match)] = text

    return write


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = _CRITERION.search(item.name)
    if not match:
        return
    n = _key(match)
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            passed = report.passed
        else:
            passed = report.passed and not report.skipped
        _outcomes[n] = passed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes):
        status = "PASS" if _outcomes[key] else "FAIL"
        label = f"criterion {key[1]:2d}" if key[0] == 0 else f"supplementary {key[1]}"
        terminalreporter.write_line(f"{label}: {status}  {_notes.get(key, '')}".rstrip())
