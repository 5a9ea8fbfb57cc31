"""Desk-scale heterogeneous decentralized diffusion.

K expert denoisers train in complete isolation with mixed objectives
(ε-prediction and velocity-prediction) on clustered synthetic data, and are
unified at inference through schedule-aware conversion and router-weighted
ODE sampling. A closed-form Gaussian-mixture oracle backs every algebraic
claim with an exact reference.
"""

__version__ = "0.1.0"
