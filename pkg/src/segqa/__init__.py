"""Quality assurance for black-box segmentation models.

Synthetic multi-domain benchmark, autoencoder-based domain-shift and shape
detectors, per-model accuracy regressors and drift monitoring.
"""

__version__ = "0.1.0"
