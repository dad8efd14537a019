import numpy as np
import pytest
import torch

from groupsurv.data import SynthConfig, generate_cohort


def small_cfg(**kw):
    base = dict(n_slides=24, patches_min=5, patches_max=30, dim=8, grid_width=5, seed=3)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    return generate_cohort(small_cfg(), out)


# -- acceptance report -------------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        item.config._acceptance[n] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, status, detail = results[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" ({detail})" if detail else ""))
