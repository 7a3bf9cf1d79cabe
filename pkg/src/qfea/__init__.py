"""Quefrency-domain front-ends and a GMM countermeasure for replay detection."""

__version__ = "0.1.0"
