"""Kernel backend selection.

Hot inner loops (neighbour enumeration, triplet pairing, segment
reductions) exist twice: a numba @njit version and a pure-numpy
fallback.  The environment variable CELLMEND_NUMBA picks the path:

    CELLMEND_NUMBA=1   require numba (ImportError if missing)
    CELLMEND_NUMBA=0   force the pure-numpy fallback
    unset              use numba when importable, numpy otherwise

Both paths compute identical results; see benchmarks/bench_backends.py
for the speed comparison.
"""

from __future__ import annotations

import os

_FALSE = {"0", "false", "no", "off"}
_TRUE = {"1", "true", "yes", "on"}


def _resolve() -> bool:
    flag = os.environ.get("CELLMEND_NUMBA", "").strip().lower()
    if flag in _FALSE:
        return False
    if flag in _TRUE:
        import numba  # noqa: F401  -- fail loudly when explicitly requested

        return True
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


NUMBA_ENABLED = _resolve()


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
