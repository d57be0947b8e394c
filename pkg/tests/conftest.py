import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_tree(tmp_path_factory):
    from dermpipe.fixtures import make_fixture

    root = tmp_path_factory.mktemp("fixture")
    return make_fixture(root)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "detail": ""})
    if call.excinfo is None:
        return
    if call.excinfo.errisinstance(pytest.skip.Exception):
        if entry["status"] == "PASS":
            entry["status"], entry["detail"] = "SKIP", str(call.excinfo.value)
    else:
        entry["status"], entry["detail"] = "FAIL", call.excinfo.exconly().splitlines()[0][:160]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number}: {e['status']:4s} {e['title']}"
        if e["detail"]:
            line += f" ({e['detail']})"
        terminalreporter.write_line(line)
