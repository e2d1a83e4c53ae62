"""Multi-image conditional flow matching with adaptive three-axis RoPE."""

__version__ = "0.1.0"
