"""Desk-scale simulator of a mode-multiplexed fiber link with Kramers-Kronig receivers."""

from .sigkit import ComplexFrame, Constellation, RrcSpec

__all__ = ["ComplexFrame", "Constellation", "RrcSpec"]
__version__ = "0.1.0"
