"""Optimal multiple testing in the general two-group model."""

from .model import (
    Blocks,
    Equicorrelated,
    Independent,
    MarginalMixture,
    NormalComponent,
    Sample,
    TwoGroupModel,
    marginal_density,
    sample,
    sample_batch,
)
from .locfdr import LocFdrVector, locfdr, locfdr_batch, marginal_locfdr

__version__ = "0.1.0"
