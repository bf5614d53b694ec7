"""querysplat: feed-forward compact Gaussian splatting from unposed views."""

__version__ = "0.1.0"
