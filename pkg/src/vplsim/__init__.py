"""Virtual prototype lens simulation toolkit.

Generates statistical lens aberration samples, synthesizes their point
spread functions by Fraunhofer wave optics, and applies spatially variant
degradation to images.  Includes correlation-distillation loss kernels and
segmentation scoring utilities for downstream training pipelines.
"""

__version__ = "0.1.0"
