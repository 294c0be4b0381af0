"""Multimodal in-bed 3D human pose and shape estimation at desk scale.

A parametric articulated body mesh, a pyramid scheme fusing depth / IR /
pressure / RGB, and a coarse-to-fine attention-based reconstruction loop,
all verified on deterministic synthetic data.
"""

__version__ = "0.1.0"
