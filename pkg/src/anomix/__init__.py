"""Probabilistic anomaly scoring for condition monitoring.

Learns the conditional distribution of health indices under nominal
operation with a fused mixture-of-experts model, scores new observation
windows with an exactly computed probabilistic anomaly score, and turns
the scores into calibrated fault-detection metrics with explainability
maps.
"""

__version__ = "0.1.0"
