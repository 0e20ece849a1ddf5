"""Desk-scale planar biped walking lab.

Pipeline: collect walking data with a model-based planner, learn a
low-dimensional latent state with an autoencoder, train a PPO gait policy on
that latent state, and evaluate tracking, robustness, and latent structure.
"""

__version__ = "0.1.0"
