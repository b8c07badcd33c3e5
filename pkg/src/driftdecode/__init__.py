"""One-step JSCC image decoding trained with an instance-level feature drift loss."""

__version__ = "0.1.0"
