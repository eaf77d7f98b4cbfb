"""Desk-scale adversarial training toolkit.

Normalizer-free robust training and its baselines (batch norm, mixture batch
norm, instance norm) behind one residual architecture, with an L-inf attack
suite, robustness-geometry metrics, statistics probes, seeded augmentations,
and a reproducible experiment harness.
"""

__version__ = "0.1.0"

from . import analysis, attacks, augment, nfcore, objectives
