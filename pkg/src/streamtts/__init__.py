"""Streaming LSTM-RNN parametric speech synthesis with deployment optimizations."""

__version__ = "0.1.0"
