"""DPG minimum-residual solver for 3D linear elasticity with coupled broken formulations."""
import os

THREADS_ENV = "COUPLED_DPG_THREADS"

# thread pools read these once, when the numerical libraries are first loaded
if os.environ.get(THREADS_ENV):
    for _var in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        os.environ[_var] = os.environ[THREADS_ENV]

__version__ = "0.1.0"
