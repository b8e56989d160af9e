import numpy as np
import pytest

from robumtl.backbone import ModelConfig, MtlModel
from robumtl.perturb import build_corpus

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
        entry["ok"] = entry["ok"] and rep.outcome == "passed"
        entry["seconds"] += rep.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {e['title']}  ({e['seconds']:.1f}s)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(image_size=16, patch=2, channels=(4, 8, 8, 16), heads=(1, 2, 2, 4), mlp_ratio=2)


@pytest.fixture
def tiny_model(tiny_config):
    return MtlModel(tiny_config, seed=3)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root, 24, seed=5)
    return root
