"""EEG person identification: preprocessing, mesh encoding, CNN-GRU/LSTM, baselines."""

__version__ = "0.1.0"
