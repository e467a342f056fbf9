import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def desk():
    """Default desk configuration, data and the three trained variants (about 15 s)."""
    from taconv.pipeline import load_data, resolve_config, split_test, train_variants

    config = resolve_config()
    train_set, test_set = load_data(config["data"])
    cal_set, report_set = split_test(config, test_set)
    models = train_variants(config, train_set)
    return {"config": config, "train": train_set, "test": test_set, "cal": cal_set,
            "report": report_set, "models": models}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
