"""ECG spectrograms to binary Big-Five labels with a small residual CNN."""

__version__ = "0.1.0"
