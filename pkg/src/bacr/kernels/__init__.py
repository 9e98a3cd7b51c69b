"""Rollout kernel backend selection.

The compiled Cython core is used when it imported cleanly; otherwise the
pure-NumPy reference takes over. Set BACR_KERNELS=py or BACR_KERNELS=cy to
force a backend (forcing ``cy`` raises if the extension is missing).

Both backends compute the same quantities in float64 and agree to ~1e-12,
but are not guaranteed bit-identical (summation order differs), so runs are
reproducible per backend. The active backend is recorded in run summaries.
"""

import os

from . import pyref
from .pyref import (  # noqa: F401  (re-exported constants)
    ACT_ID_IDENTITY,
    ACT_ID_SILU,
    MODE_GREEDY,
    MODE_SAMPLE,
    MODE_SCORE,
)

try:
    from . import _core
    _HAVE_CORE = True
except ImportError:
    _core = None
    _HAVE_CORE = False

_forced = os.environ.get("BACR_KERNELS", "").strip().lower()
if _forced == "py":
    _impl = pyref
elif _forced == "cy":
    if not _HAVE_CORE:
        raise ImportError("BACR_KERNELS=cy but the compiled core is not built")
    _impl = _core
elif _forced:
    raise ImportError(f"unknown BACR_KERNELS value {_forced!r} (use 'py' or 'cy')")
else:
    _impl = _core if _HAVE_CORE else pyref

BACKEND = "cython" if _impl is _core and _HAVE_CORE else "python"

run_trace = _impl.run_trace
backward_trace = _impl.backward_trace


def get_backend(name: str):
    """Return the module implementing a named backend ('python'/'cython')."""
    if name == "python":
        return pyref
    if name == "cython":
        if not _HAVE_CORE:
            raise ValueError("compiled backend not available")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["python", "cython"] if _HAVE_CORE else ["python"]
