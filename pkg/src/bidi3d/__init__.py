"""Coupled 2D-3D diffusion sampling of signed-distance grids and multi-view
image sets, with voxel-field distillation and score-based refinement."""

__version__ = "0.1.0"
