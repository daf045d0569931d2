"""Hot kernels of the RMS model: network solve, DG right-hand side, Rosenbrock stepping.

Two interchangeable backends expose the same ``Model`` class:

compiled
    Cython extension ``adnsim.kernels._core`` (built by ``pip install``).
python
    ``adnsim.kernels.fallback``, numpy only.

The compiled backend is preferred at import; set ``ADNSIM_KERNEL=python`` to
force the fallback or ``ADNSIM_KERNEL=compiled`` to fail loudly if it is missing.
"""

from __future__ import annotations

import os

from . import fallback
from .fallback import MAX_STEPS, NET_FAIL, OK, STEP_UNDERFLOW, NetworkFailure

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_choice = os.environ.get("ADNSIM_KERNEL", "auto").lower()
if _choice == "compiled" and _core is None:
    raise ImportError("ADNSIM_KERNEL=compiled but adnsim.kernels._core is not built")

BACKEND = "compiled" if (_core is not None and _choice != "python") else "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _core is not None else [])


def model_class(backend: str | None = None):
    """``Model`` class of the requested backend (default: the one selected at import)."""
    backend = backend or BACKEND
    if backend == "python":
        return fallback.Model
    if backend == "compiled":
        if _core is None:
            raise ImportError("compiled kernel backend is not available")
        return _core.Model
    raise ValueError(f"unknown kernel backend {backend!r}")


__all__ = ["BACKEND", "MAX_STEPS", "NET_FAIL", "OK", "STEP_UNDERFLOW", "NetworkFailure",
           "available_backends", "model_class"]
