"""Desk-scale pseudo-annotation engine.

Generates instance-level pseudo boxes and masks from image + text-label
pairs via attention-derived activation maps, iterative masking, weakly
supervised proposals, and point-supervised patch segmentation, plus the
evaluation harness to score the results against ground truth.
"""

__version__ = "0.1.0"
