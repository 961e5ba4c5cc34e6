"""Multi-session colored map fusion toolkit"""

__version__ = "0.1.0"
