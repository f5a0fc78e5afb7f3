"""Vision-token compression into VoCo activations: masks, a toy decoder, two-stage caching."""

import os

# Bit-exact training and stable timings need single-threaded BLAS; must run before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
