"""Lifelong small-object change detection with self-harvested object priors."""

__version__ = "0.1.0"
