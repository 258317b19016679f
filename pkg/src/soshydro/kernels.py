"""Backend selection for the hot stepping loops.

The compiled Cython kernels are used when they import and the mobility is
one of the built-in families.  Setting the environment variable
``SOSHYDRO_BACKEND=numpy`` forces the pure numpy fallback for every call.
Both backends consume the random stream identically.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback
from .lattice import Mobility

try:  # pragma: no cover - exercised implicitly by whichever backend is present
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

__all__ = ["BACKEND", "available_backends", "run_periodic", "run_box", "resolve_backend"]


def available_backends() -> list[str]:
    return (["cython"] if _compiled is not None else []) + ["numpy"]


def _default_backend() -> str:
    env = os.environ.get("SOSHYDRO_BACKEND", "").strip().lower()
    if env in ("numpy", "fallback"):
        return "numpy"
    if env == "cython" and _compiled is None:
        raise ImportError("SOSHYDRO_BACKEND=cython but the compiled kernels are not built")
    return "cython" if _compiled is not None else "numpy"


BACKEND = _default_backend()


def resolve_backend(mob: Mobility, backend: str | None = None) -> str:
    """Backend that will run ``mob``: user mobilities always use numpy."""
    b = BACKEND if backend is None else backend
    if b not in ("cython", "numpy"):
        raise ValueError(f"unknown backend {b!r}")
    if b == "cython" and (_compiled is None or mob.kind is None):
        if backend == "cython" and _compiled is None:
            raise ImportError("compiled kernels are not built")
        return "numpy"
    return b


def _out(out, n, n_steps, stride):
    # Without a snapshot buffer nothing is recorded.
    if out is None:
        return np.zeros((0, n)), int(n_steps) + 1
    return out, stride


def run_periodic(x, mob: Mobility, n_steps, c4, c2, ns, field, scheme, rng, out=None, stride=1, backend=None,
                 step0=0):
    """Advance a periodic slope field in place; see ``_kernels.run_periodic``.

    ``step0`` is the global index of the first step; the Metropolis sweep
    alternates its direction on the parity of the global step index.

    Returns
    -------
    (records, bad_step, rejections) : tuple of int
    """
    out, stride = _out(out, x.shape[0], n_steps, stride)
    if resolve_backend(mob, backend) == "cython":
        if field is not None:
            # The kernel takes a writable buffer; broadcast views are read-only.
            field = np.require(field, np.float64, ["C", "W"])
        return _compiled.run_periodic(x, mob.kind, mob.kernel_param, int(n_steps), c4, c2, ns,
                                      field, int(scheme), rng, out, int(stride), int(step0))
    return _fallback.run_periodic(x, mob, int(n_steps), c4, c2, ns, field, int(scheme), rng, out, int(stride),
                                  int(step0))


def run_box(x, mob: Mobility, n_steps, dt, scheme, rng, out=None, stride=1, backend=None, step0=0):
    """Advance a box window in place; see ``_kernels.run_box``."""
    out, stride = _out(out, x.shape[0], n_steps, stride)
    if resolve_backend(mob, backend) == "cython":
        return _compiled.run_box(x, mob.kind, mob.kernel_param, int(n_steps), dt, int(scheme), rng, out, int(stride),
                                 int(step0))
    return _fallback.run_box(x, mob, int(n_steps), dt, int(scheme), rng, out, int(stride), int(step0))
