"""Face recognition from affine-simulated SURF features and VLAD encodings."""

__version__ = "0.1.0"
