"""Clustered personalized federated learning with a membership-inference red team."""

__version__ = "0.1.0"
