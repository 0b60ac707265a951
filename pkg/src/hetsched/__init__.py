"""Heterogeneity-aware cluster scheduling: optimization-based policies over
time-fraction allocation matrices, a round-based scheduling mechanism, a
colocation throughput estimator, and a discrete-event simulator."""

__version__ = "0.1.0"
