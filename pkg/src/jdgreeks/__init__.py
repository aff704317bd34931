"""Monte Carlo Malliavin-weight Greeks for one-dimensional jump-diffusion SDEs."""

__version__ = "0.1.0"
