"""Robustness evaluation and hardening of patch classifiers under
parameterized, box-constrained image transforms (stain, compression,
blur, resolution, brightness/contrast, geometry, additive noise)."""

__version__ = "0.1.0"
