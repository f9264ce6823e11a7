"""Soft contextual data augmentation for neural machine translation with conditional masked LMs."""

__version__ = "0.1.0"
