"""State-rectified unsupervised discriminative feature learning on synthetic data."""

__version__ = "0.1.0"
