"""Pin the BLAS pool to one thread before numpy loads.

Byte-identical rerun assertions only hold under a fixed reduction order,
which a fixed thread count guarantees.
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
