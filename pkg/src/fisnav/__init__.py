"""Desk-scale navigation workbench: GRPO with format/understanding/navigation
rewards, a chain-of-thought data engine, a fast/slow dual-rate controller and
a framed client-server control loop, all on a 2D kinematic simulator."""

__version__ = "0.1.0"
