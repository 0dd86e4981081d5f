"""Kernel backend selection.

Hot numeric loops (3D convolution and trilinear sampling) have two
implementations: a numba-JIT one and a vectorized pure-numpy fallback.
The env var VOLTRACK_BACKEND chooses explicitly ("numba" or "numpy");
unset, numba is used when importable.
"""

import os

_ACTIVE = None


def backend_name() -> str:
    global _ACTIVE
    if _ACTIVE is None:
        choice = os.environ.get("VOLTRACK_BACKEND", "").strip().lower()
        if choice not in ("", "numba", "numpy"):
            raise ValueError(f"VOLTRACK_BACKEND must be 'numba' or 'numpy', got {choice!r}")
        if choice == "numpy":
            _ACTIVE = "numpy"
        elif choice == "numba":
            import voltrack.kernels_numba  # noqa: F401  fail loudly if unavailable
            _ACTIVE = "numba"
        else:
            # the JIT kernels win through prange on multicore hosts; on a
            # single core the BLAS-backed numpy path is faster
            if (os.cpu_count() or 1) > 1:
                try:
                    import voltrack.kernels_numba  # noqa: F401
                    _ACTIVE = "numba"
                except ImportError:
                    _ACTIVE = "numpy"
            else:
                _ACTIVE = "numpy"
    return _ACTIVE


def kernels():
    """Return the active kernel module (conv3d_fwd/bwd, sample_trilinear)."""
    if backend_name() == "numba":
        from voltrack import kernels_numba
        return kernels_numba
    from voltrack import kernels_numpy
    return kernels_numpy
