"""Multi-conductor optimal power flow formulations with an explicit neutral."""

__version__ = "0.1.0"
