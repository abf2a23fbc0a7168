"""Graph-network PPO agent for a two-lane lane-change task, built on NumPy."""

__version__ = "0.1.0"
