"""Adversarial garment patterns against person detectors.

Differentiable pasting of a learnable pattern onto clothing regions, attack
and printability losses, a frozen toy detector, pattern training and
AP-based evaluation.
"""

__version__ = "0.1.0"
