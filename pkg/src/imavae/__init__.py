"""Numerical laboratory for near-deterministic Gaussian VAEs: self-consistency,
the self-consistent ELBO versus the IMA-regularised log-likelihood, and
identifiability on synthetic nonlinear ICA data."""

__version__ = "0.1.0"
