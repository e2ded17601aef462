import pathlib

import pytest

from oauthguard.harness import Harness
from oauthguard.http_model import HttpTransaction

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


def tx(url, method="GET", headers=(), body=None, **kw):
    return HttpTransaction.build(method, url, headers, body, **kw)


@pytest.fixture(scope="module")
def env():
    with Harness() as h:
        yield h


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
