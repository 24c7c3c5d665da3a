"""Point cloud completion with style-modulated folding and multi-view depth-map critique."""
__version__ = "0.1.0"
