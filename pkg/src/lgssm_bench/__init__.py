"""Benchmark of model-based and LSTM classifiers on linear Gaussian state-space sequences."""

__version__ = "0.1.0"
