import contextlib

import pytest

# acceptance lines in the order they were decided, plus free-form report tables
_VERDICTS = []
_NOTES = []


class Criterion:
    def __init__(self, name):
        self.name = name
        self.details = []

    def note(self, text):
        self.details.append(text)


@contextlib.contextmanager
def _criterion(name, echo):
    c = Criterion(name)
    try:
        yield c
    except BaseException as exc:
        line = f"FAIL  {name}: {'; '.join(c.details + [str(exc).splitlines()[0] if str(exc) else type(exc).__name__])}"
        _VERDICTS.append(line)
        echo(line)
        raise
    line = f"PASS  {name}" + (f": {'; '.join(c.details)}" if c.details else "")
    _VERDICTS.append(line)
    echo(line)


@pytest.fixture()
def criterion(capsys):
    def echo(line):
        with capsys.disabled():
            print("\n" + line)

    return lambda name: _criterion(name, echo)


@pytest.fixture()
def report_table(capsys):
    def emit(title, lines):
        block = [title] + [f"  {ln}" for ln in lines]
        _NOTES.append(block)
        with capsys.disabled():
            print("\n" + "\n".join(block))

    return emit


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
    for block in _NOTES:
        terminalreporter.write_line("")
        for line in block:
            terminalreporter.write_line(line)
