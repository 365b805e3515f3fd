"""Module entry point: ``python -m mmsr``.

BLAS thread pools are pinned to one thread before numpy loads so runs are
single-core and their timings mean something.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .cli import main  # noqa: E402  (env vars must precede the numpy import)

raise SystemExit(main())
