"""MatrixConv hyperspectral unmixing with unrolled networks.

Subpackages of interest: :mod:`mcunmix.ndgraph` (autodiff),
:mod:`mcunmix.reference` (ADMM solvers), :mod:`mcunmix.nets` (unrolled
networks), :mod:`mcunmix.training`, :mod:`mcunmix.red`,
:mod:`mcunmix.baselines`, :mod:`mcunmix.synth`, :mod:`mcunmix.metrics`
and :mod:`mcunmix.cli`.
"""

from .hsi import (AbundanceMatrix, ConstraintViolation, EndmemberMatrix, Guidance, HsiCube,
                  lmm_forward, validate_constraints)

__version__ = "0.1.0"

__all__ = [
    "HsiCube",
    "EndmemberMatrix",
    "AbundanceMatrix",
    "Guidance",
    "ConstraintViolation",
    "lmm_forward",
    "validate_constraints",
]
