"""Kernel backend selection.

The compiled extension ``hybridpdf._kernels`` is used when it imports; the
numpy implementation in ``hybridpdf._fallback`` is used otherwise, or when the
environment variable ``HYBRIDPDF_BACKEND=python`` is set before import.
"""
from __future__ import annotations

import contextlib
import os
import warnings

from . import _fallback

_compiled = None
_import_error: Exception | None = None
try:
    from . import _kernels as _compiled  # type: ignore[no-redef]
except ImportError as exc:  # pragma: no cover - depends on build
    _import_error = exc

_active = _fallback
if _compiled is not None and os.environ.get("HYBRIDPDF_BACKEND", "").lower() != "python":
    _active = _compiled
elif _compiled is None and os.environ.get("HYBRIDPDF_BACKEND", "").lower() == "compiled":
    warnings.warn(f"compiled kernels unavailable ({_import_error}); using numpy fallback")


def kernels():
    """Return the active kernel module."""
    return _active


def name() -> str:
    """'compiled' or 'python'."""
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def compiled_available() -> bool:
    return _compiled is not None


def set_backend(which: str) -> None:
    """Switch the active backend ('compiled' or 'python')."""
    global _active
    if which == "python":
        _active = _fallback
    elif which == "compiled":
        if _compiled is None:
            raise RuntimeError(f"compiled kernels unavailable: {_import_error}")
        _active = _compiled
    else:
        raise ValueError(f"unknown backend {which!r}")


@contextlib.contextmanager
def use_backend(which: str):
    """Temporarily switch backends (used by tests and benchmarks)."""
    global _active
    prev = _active
    set_backend(which)
    try:
        yield
    finally:
        _active = prev


_threads = 1


def threads() -> int:
    """Number of threads used by the compiled kernels."""
    return _threads


def set_threads(n: int) -> None:
    global _threads
    if int(n) < 1:
        raise ValueError("threads must be >= 1")
    _threads = int(n)
