"""Chambolle-Pock and unrolled CP-net reconstruction of undersampled MRI data."""

__version__ = "0.1.0"
