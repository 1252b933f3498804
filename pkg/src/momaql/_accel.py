"""Numba switch.

Hot kernels are compiled with numba when it is importable and the environment
variable ``MOMAQL_NUMBA`` is not set to ``0``/``false``/``off``. Otherwise every
kernel falls back to its pure-numpy twin. The flag is read once at import.
"""
import logging
import os

logger = logging.getLogger(__name__)

_FLAG = os.environ.get("MOMAQL_NUMBA", "1").strip().lower()
REQUESTED = _FLAG not in ("0", "false", "off", "no")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = REQUESTED and HAVE_NUMBA

if REQUESTED and not HAVE_NUMBA:  # pragma: no cover
    logger.warning("numba not importable, using numpy kernels")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity decorator otherwise.

    Compilation happens whether or not ``USE_NUMBA`` is set so that the
    benchmark can compare both paths inside one process.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
