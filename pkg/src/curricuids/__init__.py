"""Curriculum-trained intrusion detection with explanation-driven feature pruning."""

__version__ = "0.1.0"
