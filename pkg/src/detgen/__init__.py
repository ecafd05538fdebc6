"""Detector-reward GRPO laboratory at desk scale."""
import os as _os

# Must run before numpy loads its BLAS.
if _os.environ.get("DETGEN_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DETGEN_THREADS"])

__version__ = "0.1.0"
