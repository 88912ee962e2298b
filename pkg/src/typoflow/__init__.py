"""Typography- and style-controllable text rendering with a small flow DiT."""

__version__ = "0.1.0"
