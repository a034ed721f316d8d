"""Desk-scale membership-inference audit toolkit.

Three attacks against a trained classifier (global-threshold marginal
baseline, offline shadow-ensemble z-scoring, per-example quantile-regression
thresholds), an evaluation harness built around class dropout and sample
scarcity, and transfer diagnostics that probe when per-example thresholds
fitted on one distribution stay calibrated on another.
"""

__version__ = "0.1.0"
