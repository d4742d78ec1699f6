"""Proposal learning for semi-supervised two-stage detection on synthetic scenes."""

__version__ = "0.1.0"
