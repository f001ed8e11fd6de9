"""Universal multi-rate autoencoder framework for MIMO CSI feedback."""

__version__ = "0.1.0"
