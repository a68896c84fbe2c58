"""Backdoor poisoning and self-training defenses at desk scale."""

__version__ = "0.1.0"
