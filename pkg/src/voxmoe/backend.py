"""Kernel backend selection.

The hot numeric loops (voxel binning, prefix scan, rulebook construction,
gather-FMA-scatter) exist twice: a numba-compiled version and a pure-numpy
one.  The ``VOXMOE_BACKEND`` environment variable picks which pair is wired
in at import time:

* ``auto`` (default): numba when importable, numpy otherwise
* ``numba``: require numba, raise if it is missing
* ``numpy``: force the fallback even when numba is installed

Both backends accumulate in the same element order, so results never depend
on the backend for integer outputs and agree to rounding noise for floats.
"""

from __future__ import annotations

import os

ENV_VAR = "VOXMOE_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def resolve_backend(choice: str | None = None) -> str:
    """Resolve a backend name from an explicit choice or the environment."""
    choice = (choice or os.environ.get(ENV_VAR, "auto")).strip().lower()
    if choice not in _CHOICES:
        raise ValueError(f"{ENV_VAR} must be one of {_CHOICES}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not numba_available():
            raise ImportError(f"{ENV_VAR}=numba but numba is not importable")
        return "numba"
    return "numba" if numba_available() else "numpy"


ACTIVE_BACKEND = resolve_backend()
USING_NUMBA = ACTIVE_BACKEND == "numba"
