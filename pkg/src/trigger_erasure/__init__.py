"""Test-time erasure of visual backdoor triggers in vision-token pipelines."""

__version__ = "0.1.0"
