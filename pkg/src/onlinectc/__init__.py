"""Online CTC(h; h') training for unidirectional LSTMs over continuous streams."""

__version__ = "0.1.0"
