"""Co-search toolkit: EGM-to-ECG reconstruction networks and their accelerators."""

import os as _os

# The training loops interleave small BLAS calls with JIT loops; a spinning
# multi-threaded BLAS pool slows that pattern down several-fold on small
# machines. Respect explicit user settings, otherwise stay single-threaded.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
