"""First-shot unsupervised anomalous sound detection: autoencoder baseline toolkit."""

__version__ = "0.1.0"
