"""Split-latent permutation autoencoder: style/content disentanglement for epoched time series."""

__version__ = "0.1.0"
