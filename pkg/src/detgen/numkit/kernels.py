"""Kernel backend chosen at import time.

Set ``DETGEN_KERNELS=python`` to force the numpy fallback.
"""
import os

from . import _pykernels

python_backend = _pykernels

if os.environ.get("DETGEN_KERNELS", "").lower() in ("python", "numpy", "py"):
    compiled_backend = None
else:
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _active is compiled_backend else "python"

affine = _active.affine
grad_weight = _active.grad_weight
grad_input = _active.grad_input
