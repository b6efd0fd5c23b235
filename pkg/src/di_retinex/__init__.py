"""Zero-shot low-light enhancement grounded in a digital-imaging Retinex model."""

__version__ = "0.1.0"
