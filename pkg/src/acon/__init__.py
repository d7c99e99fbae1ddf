"""ACON activations (A/B/C, meta-ACON, ACON-FReLU) with analytic gradients and a numpy harness."""

__version__ = "0.1.0"
