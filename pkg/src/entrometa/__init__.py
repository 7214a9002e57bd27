"""entrometa: a desk-scale lab for entropy-limited supervision.

Compares bi-level (meta) training against whole-class training under a
fixed annotation-entropy budget, and provides the supporting machinery:
a second-order autodiff engine, entropy/label-noise conversion, uniform
stability generalization bounds, density-based pseudo-task construction,
SVCCA representation-stability measures, and a seeded experiment harness.
"""

__version__ = "0.1.0"
