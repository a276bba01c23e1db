"""Stock-return forecasting with wavelet temporal encoding, relational graph
convolution and an investor-game relation module."""

__version__ = "0.1.0"
