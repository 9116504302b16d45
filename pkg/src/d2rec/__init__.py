"""Causal disentanglement recommender trained on social and interaction graphs."""
import os as _os

# BLAS thread pools read these once, at numpy import; one thread keeps float sums reproducible.
_threads = _os.environ.get("D2REC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
