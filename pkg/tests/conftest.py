import pytest

_verdicts = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_verdicts] = {}


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; its line reads PASS only if the test finishes."""
    verdicts = request.config.stash[_verdicts]

    def start(key: str, title: str):
        verdicts[key] = {"title": title, "detail": "", "passed": False}

        def note(detail: str):
            verdicts[key]["detail"] = detail
        return note

    yield start


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" and "criterion" in item.fixturenames:
        # test_c3_... reports for criterion C3
        key = item.name.split("_")[1].upper()
        if key in item.config.stash[_verdicts]:
            item.config.stash[_verdicts][key]["passed"] = rep.passed


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_verdicts]
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(verdicts):
        v = verdicts[key]
        line = f"{key} {'PASS' if v['passed'] else 'FAIL'}  {v['title']}"
        if v["detail"]:
            line += f"  [{v['detail']}]"
        terminalreporter.write_line(line)
