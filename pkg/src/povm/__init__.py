"""Proof-of-VM blockchain simulator: metered jobs, k-vote redundancy and a commit-reveal lottery."""

__version__ = "0.1.0"
