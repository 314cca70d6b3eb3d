"""Shared fixtures and the acceptance summary printed at the end of the run."""
from __future__ import annotations

import numpy as np
import pytest

from hybridpdf import _backend

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(cid: str, passed: bool, detail: str) -> None:
    _ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"[{cid}] {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda k: (len(k), k)):
        ok, detail = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(params=["compiled", "python"])
def backend(request):
    if request.param == "compiled" and not _backend.compiled_available():
        pytest.skip("compiled kernels not built")
    with _backend.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
