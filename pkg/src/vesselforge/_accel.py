"""Backend selection for the compiled kernels.

Set ``VESSELFORGE_NO_NUMBA=1`` to force the pure numpy/scipy paths.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the default install
    numba = None


def _env_disabled() -> bool:
    return os.environ.get("VESSELFORGE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and not _env_disabled()


def njit(fn=None, **options):
    """Compile ``fn`` with numba when it is importable, otherwise return it untouched.

    Usable bare (``@njit``) or with extra numba options (``@njit(inline="always")``).
    """
    if fn is None:
        return lambda f: njit(f, **options)
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True, **options)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    global USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    USE_NUMBA = name == "numba"
