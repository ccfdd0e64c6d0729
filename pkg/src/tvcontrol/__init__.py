"""Exact controls for ``M x'' + C x' + K x = F + B u`` with a total-variation penalty."""
__version__ = "0.1.0"
