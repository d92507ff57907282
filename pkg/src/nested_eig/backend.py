"""Kernel backend selection.

Hot numeric kernels exist in two flavors: a numba ``@njit`` build and a
plain-numpy build. The active flavor is chosen once, at import time, from
the ``NESTED_EIG_BACKEND`` environment variable:

* ``numba`` (default): jit-compiled kernels, falling back to numpy if
  numba is not importable;
* ``numpy``: force the plain-numpy implementations.

Both flavors are importable side by side (see ``benchmarks/``); only the
public aliases in :mod:`nested_eig.kernels` follow the flag.
"""

import os

_choice = os.environ.get("NESTED_EIG_BACKEND", "numba").strip().lower()
if _choice not in ("numba", "numpy"):
    raise ValueError(
        f"NESTED_EIG_BACKEND must be 'numba' or 'numpy', got {_choice!r}"
    )

NUMBA_AVAILABLE = False
if _choice == "numba":
    try:
        import numba  # noqa: F401

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - exercised via env flag
        NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _choice == "numba"


def jit(func):
    """Apply ``numba.njit`` when the numba backend is active, else no-op."""
    if USE_NUMBA:
        import numba

        return numba.njit(cache=True)(func)
    return func


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
