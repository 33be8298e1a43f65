import os
import sys

# MARD_THREADS caps BLAS parallelism; must be set before numpy loads.
_threads = os.environ.get("MARD_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

from mard.cli import main  # noqa: E402

sys.exit(main())
