"""Pick the compiled kernels when available; ``SUBCAL_PURE=1`` forces the fallback."""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py

if os.environ.get("SUBCAL_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]

        kernels = _compiled
        BACKEND = "cython"
    except ImportError:
        pass


def get_kernels(name: str | None = None):
    """Kernel module by name ('cython' or 'python'); default is the active backend."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels as compiled  # type: ignore[attr-defined]

        return compiled
    raise ValueError(f"unknown backend {name!r}")
