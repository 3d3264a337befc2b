import copy

import pytest

# a one-mode, short-frame link that runs end to end in about a second
TINY = {
    "name": "tiny",
    "sweep": [10.0],
    "n_captures": 1,
    "tx": {"active_modes": ["LP01"], "n_symbols": 8192, "rrc": {"span_symbols": 64}},
    "link": {"n_modes_link": 1, "target_mdl_db": 0.0, "length_km": 1.0, "snr_ceiling_db": 40.0},
    "eq": {"n_taps": 15, "n_train_symbols": 2000},
    "capture": {"measured_symbols": 4000, "guard_symbols": 64},
}

# two of three link modes launched, both receiver subsets
SMALL = {
    **TINY,
    "name": "small",
    "sweep": [8.0, 12.0],
    "n_captures": 2,
    "rx_subsets": [2, 3],
    "tx": {**TINY["tx"], "active_modes": ["LP01", "LP11a"]},
    "link": {**TINY["link"], "n_modes_link": 3},
}


@pytest.fixture
def tiny_raw():
    return copy.deepcopy(TINY)


@pytest.fixture
def small_raw():
    return copy.deepcopy(SMALL)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
