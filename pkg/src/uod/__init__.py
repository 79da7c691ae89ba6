"""Universal one-shot landmark detection across multiple anatomical domains."""

from uod.domain import DomainRegistry, DomainSpec, ImageRecord, LandmarkSet

__version__ = "0.1.0"

__all__ = ["DomainRegistry", "DomainSpec", "ImageRecord", "LandmarkSet", "__version__"]
