"""Point-cloud graph networks with edge-materialised and vertex-centric layers."""

__version__ = "0.1.0"
