import pytest


def pytest_configure(config):
    config.acceptance = {}


class CriterionRecorder:
    def __init__(self, store, number, title):
        self.store, self.number, self.title = store, number, title
        self.store[number] = (title, False, "did not finish")

    def __call__(self, ok: bool, detail: str) -> bool:
        self.store[self.number] = (self.title, bool(ok), detail)
        print(format_line(self.number, self.title, ok, detail))
        return bool(ok)


def format_line(number, title, ok, detail):
    return f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'} ({detail})"


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` returns a callable ``record(ok, detail)``."""
    def make(number, title):
        return CriterionRecorder(request.config.acceptance, number, title)
    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config.acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config.acceptance):
        terminalreporter.write_line(format_line(n, *config.acceptance[n]))
