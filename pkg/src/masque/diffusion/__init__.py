"""Toy latent diffusion: schedule, text conditioning, denoiser, backend and training."""
