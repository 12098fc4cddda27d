"""Dual-mode (think / no-think) driving planner trained with group-relative policy optimization."""

__version__ = "0.1.0"
