"""GP-based stochastic MPC for a quadcopter under wind disturbance."""

__version__ = "0.1.0"
