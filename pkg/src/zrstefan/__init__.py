"""Two-species zero-range / Kawasaki / Glauber particle system and its
deterministic limits: the semi-discrete reaction-diffusion system and the
one-phase Stefan problem with nonlinear diffusion."""

__version__ = "0.1.0"
