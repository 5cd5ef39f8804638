"""Federated malware-family classification over system-call dependency graphs."""

__all__ = ["scdg", "explorer", "neuralnet", "he", "channel", "fedproto",
           "harness", "cli"]
__version__ = "0.1.0"
