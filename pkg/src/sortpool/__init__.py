"""kth-max and learnable sorted pooling for small numpy convolutional networks."""

__version__ = "0.1.0"
