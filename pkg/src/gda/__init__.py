"""Diffusion-based input adaptation with structural guidance, at desk scale."""

from gda.guidance import GuidanceConfig, composite_guidance
from gda.nets import NetsBundle, NumericalError
from gda.sampler import AdaptationRecord, SamplerPlan, gda_adapt, gda_adapt_batch
from gda.schedule import NoiseSchedule, build_schedule, forward_diffuse

__version__ = "0.1.0"

__all__ = [
    "AdaptationRecord", "GuidanceConfig", "NetsBundle", "NoiseSchedule", "NumericalError", "SamplerPlan",
    "build_schedule", "composite_guidance", "forward_diffuse", "gda_adapt", "gda_adapt_batch",
]
