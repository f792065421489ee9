"""Recurrent attention model trained with REINFORCE and a learned baseline."""

__version__ = "0.1.0"
