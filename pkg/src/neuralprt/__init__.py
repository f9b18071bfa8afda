"""CPU neural precomputed radiance transfer with spherical-harmonic light probes."""

import os

# numba picks a threading layer on first parallel launch; workqueue needs no TBB/OpenMP
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
