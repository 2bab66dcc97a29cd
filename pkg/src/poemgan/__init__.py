"""Image-to-poem generation with a visual-poetic embedding and two adversarial discriminators."""

__version__ = "0.1.0"
