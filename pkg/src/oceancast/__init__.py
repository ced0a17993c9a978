"""Sea-surface temperature forecasting with a windowed-attention encoder-processor-decoder."""

__version__ = "0.1.0"
