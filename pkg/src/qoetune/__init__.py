"""Trace-driven ABR simulation with per-user QoE parameter tuning."""

__version__ = "0.1.0"
