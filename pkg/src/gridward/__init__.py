"""gridward: power-grid load-altering attack / EV-fleet mitigation toolkit."""

__version__ = "0.1.0"
