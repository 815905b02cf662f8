"""Staged heterogeneous collaborative BEV perception at desk scale.

Everything runs on float64 numpy through a small deterministic reverse-mode
graph engine. Results are required to be bitwise reproducible across runs
and thread counts, so BLAS thread pools are pinned to one thread at import.
"""

import threadpoolctl

# Kept alive for the life of the process; a freed limiter would restore the
# previous (nondeterministic) pool size.
_BLAS_LIMITER = threadpoolctl.threadpool_limits(limits=1)

__version__ = "0.1.0"
