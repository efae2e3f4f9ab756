"""Calibration-free two-view sensor fusion for object detection.

A small differentiable substrate (:mod:`fusedet.diffcore`) carries a
two-branch encoder whose views are correlated purely by transformer
self-attention (:mod:`fusedet.fusenet`), CenterNet-style heads
(:mod:`fusedet.heads`), the weighted loss stack (:mod:`fusedet.losses`),
a procedural paired-view scene generator with a hidden cross-view mapping
(:mod:`fusedet.scenesynth`) and detection/attention metrics
(:mod:`fusedet.evalkit`).
"""

__version__ = "0.1.0"
