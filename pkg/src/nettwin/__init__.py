"""Online digital network twin for RSRP prediction."""

__version__ = "0.1.0"
