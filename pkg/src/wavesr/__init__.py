"""Wavelet-domain conditional diffusion GAN for single-image super-resolution."""
