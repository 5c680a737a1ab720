"""Feature caching for diffusion sampling as feature-ODE integration."""
