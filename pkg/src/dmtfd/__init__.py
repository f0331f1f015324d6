"""Unsupervised fault detection for multivariate time series with a
GRU / graph-attention / normalizing-flow density model and a soft
multi-manifold contrastive head."""

__version__ = "0.1.0"
