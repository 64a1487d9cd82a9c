"""Latent Schrödinger-bridge shape completion on voxel distance fields.

Modules: ``grid`` (distance-field grids, corpus, VGRD files), ``views`` (depth
rendering and view features), ``tensor`` (network blocks, optimizers, CKPT
files), ``vqvae``, ``bridge`` (schedule, posterior, sampler), ``denoiser``,
``geometry`` (marching cubes, surface sampling, OBJ), ``metrics`` and ``cli``.
"""
__version__ = "0.1.0"
