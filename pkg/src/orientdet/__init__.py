"""Oriented object detection toolkit.

Geometry-constrained deformable sampling for localization and classification,
Gaussian-heatmap label encoding with a dynamic task-aware assigner, the full
loss stack, rotated NMS and VOC-style evaluation, and a toy training harness
over synthetic scenes and DOTA-format annotations.
"""

__version__ = "0.1.0"
