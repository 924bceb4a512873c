"""Critic-filtered reasoning-trace synthesis and evaluation for perturbation outcomes."""

__version__ = "0.1.0"
