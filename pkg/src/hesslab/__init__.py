"""Batch-Hessian spectra under sub-sampling noise, and learning rates derived from them."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("hesslab")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
