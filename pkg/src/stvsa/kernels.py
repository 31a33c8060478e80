"""Backend selection for the numerical hot loops.

The compiled Cython extension is used when it was built; otherwise, or when
``STVSA_PURE_PYTHON=1`` is set, the numpy fallback is used. ``BACKEND`` names
the active implementation.
"""
from __future__ import annotations

import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("STVSA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _impl is compiled_backend else "python"

integrate_trajectories = _impl.integrate_trajectories
sfcm_memberships = _impl.sfcm_memberships
