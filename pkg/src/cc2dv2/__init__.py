"""One-shot landmark detection: self-supervised template matching with a relative
distance bias, followed by a detector trained on the resulting pseudo-labels."""

__version__ = "0.1.0"
