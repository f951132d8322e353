"""Matrix LSTM anomaly detection on sequences of matrices."""

__version__ = "0.1.0"
