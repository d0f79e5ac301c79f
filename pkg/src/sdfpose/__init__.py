"""Joint SIM(3) pose and latent-shape estimation with a coarse ellipsoid / fine SDF object model."""

__version__ = "0.1.0"
