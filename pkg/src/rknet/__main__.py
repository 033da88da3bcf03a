import os
import sys

# cap BLAS threads as well when RKN_THREADS is set; must happen before numpy loads
if "RKN_THREADS" in os.environ:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, os.environ["RKN_THREADS"])

from .cli import main  # noqa: E402

sys.exit(main())
