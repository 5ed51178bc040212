"""RGB-D panorama outpainting with latent diffusion and seam-aware sampling."""

__version__ = "0.1.0"
