"""Backend selection for the numerical kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback takes over.  Set ``MANIFOLD_PF_BACKEND=python`` to force the
fallback (tests use this to exercise both paths).
"""

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None
else:
    BACKENDS["compiled"] = _kernels

_requested = os.environ.get("MANIFOLD_PF_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "compiled"):
    raise ImportError(f"unknown MANIFOLD_PF_BACKEND {_requested!r}")
if _requested == "compiled" and _kernels is None:
    raise ImportError("MANIFOLD_PF_BACKEND=compiled but the extension is not built")

BACKEND = _requested or ("compiled" if _kernels is not None else "python")
kernels = BACKENDS[BACKEND]

CONVERGED = _fallback.CONVERGED
LOCAL_MINIMUM = _fallback.LOCAL_MINIMUM
ITERATION_CAP = _fallback.ITERATION_CAP
OUT_OF_WORKSPACE = _fallback.OUT_OF_WORKSPACE


def use_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global kernels, BACKEND
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    previous = BACKEND
    BACKEND = name
    kernels = BACKENDS[name]
    return previous
