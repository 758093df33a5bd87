"""Kernel backend selection: compiled extension with pure-NumPy fallback.

The compiled module ``adfl.engine._core`` is preferred when importable;
``ADFL_BACKEND`` (``auto`` | ``compiled`` | ``python``) overrides. Both
backends expose the same kernel functions over the same array layouts.
"""

from __future__ import annotations

import os

import numpy as np

from . import core_py
from .core_py import Mixing

try:
    from . import _core
except ImportError:  # extension not built: pure fallback
    _core = None


def available_backends() -> tuple[str, ...]:
    return ("python", "compiled") if _core is not None else ("python",)


def get_backend(name: str):
    """Kernel module for an explicit backend name (tests, benchmarks)."""
    if name == "python":
        return core_py
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled kernels are not built; reinstall or use ADFL_BACKEND=python")
        return _core
    raise ValueError(f"backend must be 'python' or 'compiled', got {name!r}")


def _select() -> tuple[object, str]:
    choice = os.environ.get("ADFL_BACKEND", "auto")
    if choice == "auto":
        return (_core, "compiled") if _core is not None else (core_py, "python")
    return get_backend(choice), choice


kernels, BACKEND = _select()


def mixing_from_weights(w) -> Mixing:
    """Pack a WeightMatrix into the layout both backends consume."""
    indptr, indices, weights = w.to_csr()
    return Mixing(
        dense=np.ascontiguousarray(w.entries, dtype=np.float64),
        indptr=np.ascontiguousarray(indptr, dtype=np.int64),
        indices=np.ascontiguousarray(indices, dtype=np.int64),
        weights=np.ascontiguousarray(weights, dtype=np.float64),
    )
