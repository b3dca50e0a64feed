"""Decentralized multi-agent actor-critic with consensus-weighted replay."""

__version__ = "0.1.0"
