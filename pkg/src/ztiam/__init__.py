"""Zero-trust identity and access management service."""

__version__ = "0.1.0"
