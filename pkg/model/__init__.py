"""Toy diffusion transformer runtime: schedule, weight cache and denoising loop."""
