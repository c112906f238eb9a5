"""dtalker: speech-driven blendshape animation with a conditional diffusion
model, compressed by progressive step-halving distillation.

The package is pure numpy with numba-compiled recurrence kernels (see
:mod:`dtalker.backend` for the ``DTALKER_NUMBA`` switch).  Entry points live
in :mod:`dtalker.cli`; the library surface is importable per module.
"""

__version__ = "0.1.0"
