"""crowndiff: tooth-level point-cloud diffusion for dental crown generation.

Subpackages cover the full desk-scale pipeline: the dentition data model
and synthetic data (``dentition``), cylindrical boundary priors
(``boundary``), inter-tooth attention (``attention``), reference networks
and training (``nets``), the diffusion machinery (``diffusion``),
geometric fidelity metrics (``metrics``), reader-study statistics
(``stats``), and the command-line pipeline (``cli``).
"""

__version__ = "0.1.0"

from . import attention, autodiff, boundary, dentition, diffusion, metrics, nets, stats

__all__ = [
    "attention",
    "autodiff",
    "boundary",
    "dentition",
    "diffusion",
    "metrics",
    "nets",
    "stats",
    "__version__",
]
