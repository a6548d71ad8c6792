"""Diffusion-resynthesis out-of-distribution detection on procedural shapes."""

__version__ = "0.1.0"
