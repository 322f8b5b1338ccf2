"""Star-shaped diffusion models with exponential-family noise."""

from .families import Family, FamilySpec, SchedulePoint, make_point

__all__ = ["Family", "FamilySpec", "SchedulePoint", "make_point"]
__version__ = "0.1.0"
