"""Discrete-event comparison of blockchain consensus methods on a distributed monitoring workload."""

__version__ = "0.1.0"
