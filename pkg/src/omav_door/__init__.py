"""Aerial door opening: simulator, PPO trainer, MPPI baseline and evaluation harness."""

__version__ = "0.1.0"
