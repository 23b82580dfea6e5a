"""Refutation bounds for representation-based CATE estimators.

Pipeline: train a representation-learning CATE estimator (stage 0), quantify
how much treatment-relevant covariate information its representation discards
via a data-driven sensitivity parameter (stage 1), and propagate that parameter
through conditional-value-at-risk bounds into per-point treatment-effect
intervals and a treat / no-treat / defer policy (stage 2).
"""

__version__ = "0.1.0"
