"""No-reference screen-content image quality from deep feature statistics."""

__version__ = "0.1.0"
