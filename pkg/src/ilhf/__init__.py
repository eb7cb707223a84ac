"""Inclusive learning from human feedback on a synthetic recurrent token process."""

__version__ = "0.1.0"
