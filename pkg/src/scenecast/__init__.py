"""Scene-aware multi-person motion forecasting with a conditional diffusion model."""

__version__ = "0.1.0"
