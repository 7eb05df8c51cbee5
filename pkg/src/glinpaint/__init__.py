"""Progressive image inpainting with Gaussian-Laplacian feature pyramids."""

__version__ = "0.1.0"
