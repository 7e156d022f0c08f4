"""Backend switch for the hot kernels.

Set ``FEDSWA_SIM_NUMBA=0`` to force the pure-numpy path. Any other value, or
leaving it unset, uses numba when it imports cleanly.
"""
import os

_flag = os.environ.get("FEDSWA_SIM_NUMBA", "1").strip().lower()
_wanted = _flag not in ("0", "false", "no", "off")

try:
    if not _wanted:
        raise ImportError("numba disabled by FEDSWA_SIM_NUMBA")
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False


def jit(fn):
    """Compile ``fn`` with numba (nogil, cached) if available."""
    if not NUMBA_ENABLED:
        return fn
    return _njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
