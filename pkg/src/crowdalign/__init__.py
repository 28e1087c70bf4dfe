"""Domain-adaptive crowd counting with searched data transforms and feature alignment."""

__version__ = "0.1.0"
