"""Real-time super-resolution engine: nearest-convolution residual network, int8 inference, benchmarks."""

__version__ = "0.1.0"
