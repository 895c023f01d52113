"""Graph-fused spectro-topographical EEG representation learning with gradient alignment."""

__version__ = "0.1.0"
