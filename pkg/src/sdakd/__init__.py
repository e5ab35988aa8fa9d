"""Student-discriminator assisted knowledge distillation for super-resolution GANs."""

from .losses import LossWeights
from .models import ArchitectureBlueprint, ScaledArchitecture, build_discriminator, build_generator
from .pipeline import StagePlan, run_sdakd, run_stage1, run_stage2, run_stage3

__all__ = [
    "ArchitectureBlueprint",
    "LossWeights",
    "ScaledArchitecture",
    "StagePlan",
    "build_discriminator",
    "build_generator",
    "run_sdakd",
    "run_stage1",
    "run_stage2",
    "run_stage3",
]
__version__ = "0.1.0"
