"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``SPIKEFIELD_PURE`` is set to a non-empty value other
than ``0``, the numpy implementation is used.
"""
from __future__ import annotations

import os

from . import _pykernels

pure = _pykernels

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

_force_pure = os.environ.get("SPIKEFIELD_PURE", "") not in ("", "0")

backend = pure if (_force_pure or compiled is None) else compiled
BACKEND = backend.NAME

_threads = 1


def set_threads(n: int | None) -> None:
    """Cap worker threads for the parallel render kernel (None = all cores)."""
    global _threads
    _threads = max(1, int(n if n else (os.cpu_count() or 1)))


def threads() -> int:
    return _threads


def available() -> dict:
    out = {"numpy": pure}
    if compiled is not None:
        out["cython"] = compiled
    return out
