"""Kernel backend selection: compiled extension if available, else pure Python.

The two backends are bit-identical by construction; the compiled one is just
fast.  Selection happens at import and can be forced with the DVSIM_BACKEND
environment variable ("compiled" or "python") or at runtime via set_backend
(used by the parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import _kernel_py

_BACKENDS = {"python": _kernel_py}
try:
    from . import _kernel_cy

    _BACKENDS["compiled"] = _kernel_cy
except ImportError:  # extension not built; fall back silently
    _kernel_cy = None

_forced = os.environ.get("DVSIM_BACKEND")
if _forced is not None and _forced not in _BACKENDS:
    raise ImportError(
        f"DVSIM_BACKEND={_forced!r} unavailable (choices: {sorted(_BACKENDS)})"
    )
_active = _forced or ("compiled" if "compiled" in _BACKENDS else "python")


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r} (choices: {sorted(_BACKENDS)})")
    _active = name


def kernel():
    """The module providing run_steps for the active backend."""
    return _BACKENDS[_active]
