"""Desk-scale domain-adaptive detection: frozen-encoder labelling and feature alignment."""

__version__ = "0.1.0"
