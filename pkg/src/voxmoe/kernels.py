"""Facade wiring the active kernel backend (see :mod:`voxmoe.backend`)."""

from . import backend

if backend.USING_NUMBA:
    from . import _kernels_numba as _impl
else:
    from . import _kernels_numpy as _impl

ACTIVE_BACKEND = backend.ACTIVE_BACKEND

exclusive_scan = _impl.exclusive_scan
accumulate_cells = _impl.accumulate_cells
rulebook_pairs = _impl.rulebook_pairs
scatter_fma = _impl.scatter_fma
