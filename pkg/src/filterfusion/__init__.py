"""Differentiable Bayesian filters with multimodal fusion.

Learnable extended Kalman and particle filters over vision, force, and
proprioception, trained end-to-end by backpropagation through time on
planar pushing and door manipulation simulators.
"""

__version__ = "0.1.0"
