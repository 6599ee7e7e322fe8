"""Kernel backend selection.

The numeric hot loops (convolution, LSTM cell, attention scoring) exist in
two builds: a numba ``@njit`` build and a pure-numpy build.  Both produce
the same values; the numba build is much faster per call at the small
tensor sizes this package runs at.

Selection order:

* ``TIENET_BACKEND=numpy`` forces the pure-numpy path.
* otherwise numba is used when importable, numpy when not.

The choice is made once at import time so a process never mixes paths
mid-run (keeps runs bit-reproducible within one backend).
"""

import os

NUMBA_AVAILABLE = False
try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    pass

_requested = os.environ.get("TIENET_BACKEND", "").strip().lower()

if _requested == "numpy":
    ACTIVE_BACKEND = "numpy"
elif _requested == "numba":
    if not NUMBA_AVAILABLE:
        raise ImportError("TIENET_BACKEND=numba but numba is not importable")
    ACTIVE_BACKEND = "numba"
elif _requested == "":
    ACTIVE_BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"
else:
    raise ValueError(
        f"TIENET_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )


def njit_if_available(func):
    """Compile with numba when importable, else return func unchanged."""
    if NUMBA_AVAILABLE:
        return numba.njit(cache=True)(func)
    return func
