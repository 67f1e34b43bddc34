"""Numerical laboratory for anchored-KL policy-gradient machinery.

Scalar reverse-mode tape with stop-gradient, categorical policy slots,
the sampled/top-k KL estimator zoo with exhaustive-enumeration audits,
the f-divergence generalization, moving-average anchor lag dynamics,
a bias-variance sweep harness, and a desk-scale training loop.
"""

__version__ = "0.1.0"
