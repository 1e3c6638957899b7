"""Shared pytest hooks: always-visible verdict lines for the acceptance gate."""

import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    # bypass output capture so the verdict shows in plain `pytest` runs
    tag = getattr(getattr(item, "function", None), "_criterion", None)
    if tag is not None and rep.when == "call":
        num, label = tag
        verdict = "PASS" if rep.passed else "FAIL"
        tr = item.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line(f"criterion {num:02d} {verdict}  {label}")
