"""Unsupervised multi-modal machine translation at desk scale."""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
