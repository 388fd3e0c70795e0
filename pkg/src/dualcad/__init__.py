"""Dual-time-point detection of enhancing brain lesions on paired MRI examinations."""

__version__ = "0.1.0"
