"""Active discriminative domain adaptation for 2D membrane segmentation."""

__version__ = "0.1.0"
