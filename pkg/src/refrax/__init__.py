"""Refractive and reflective light paths through known dielectric geometry,
with a voxel radiance field optimized along those paths."""

__version__ = "0.1.0"
