"""Bobkov lab - Bellman-function verification of Gaussian isoperimetry in JAX."""

from importlib.metadata import version

import jax

jax.config.update("jax_enable_x64", True)

__version__ = version("bobkov-lab")
__all__ = []
