"""Rank-reduced autoencoders with latent DMD dynamics.

An autoencoder whose latent space is compressed through a truncated SVD
and whose latent time evolution is forced through a least-squares linear
operator, with adaptive selection of the bottleneck rank during training.
"""

__version__ = "0.1.0"
