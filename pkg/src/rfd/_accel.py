"""Backend selection for the hot kernels.

``RFD_NUMBA=0`` forces the pure-numpy code paths even when numba is
installed. Kernels take an explicit ``backend`` argument so both paths can be
exercised (and benchmarked) in one process.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

HAVE_NUMBA = numba is not None


def _env_enabled() -> bool:
    return os.environ.get("RFD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def default_backend() -> str:
    return "numba" if HAVE_NUMBA and _env_enabled() else "numpy"


def resolve(backend: str | None) -> str:
    backend = backend or default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        return "numpy"
    return backend


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def set_threads(n: int | None):
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
