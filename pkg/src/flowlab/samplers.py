"""Sampler factories for the data-side distributions of the experiments.

A sampler is a callable ``(rng, count) -> (count, n) array``.  The bound
experiments use the uniform unit cube; the 2-D correlation experiment
uses the symmetric square; the push-forward sampler materializes the
generation distribution itself by flowing standard-normal draws.
"""

from __future__ import annotations

import numpy as np

from .mixture import GaussianMixture
from .ode import SolverConfig, generate

__all__ = ["uniform_cube_sampler", "pushforward_sampler"]


def uniform_cube_sampler(low, high, dim: int):
    """Uniform sampler on the axis-aligned box [low, high]^dim."""
    low_arr = np.broadcast_to(np.asarray(low, dtype=float), (dim,))
    high_arr = np.broadcast_to(np.asarray(high, dtype=float), (dim,))
    if np.any(high_arr <= low_arr):
        raise ValueError("sampler box must have positive side lengths")

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(low_arr, high_arr, size=(count, dim))

    return sample


def pushforward_sampler(gm: GaussianMixture, cfg: SolverConfig, return_noise: bool = False):
    """Sampler for the generation distribution: flow N(0, I) draws to t=0.

    With ``return_noise`` the sampler returns ``(x, z)`` so callers can
    reuse the driving noise (e.g. to check inverted-noise norms against
    the drawn ones without a second solve).
    """

    def sample(rng: np.random.Generator, count: int):
        z = rng.standard_normal((count, gm.dim))
        # fixed-size chunks keep the adaptive controller's coupling local
        parts = [generate(gm, z[lo : lo + 512], cfg) for lo in range(0, count, 512)]
        x = np.concatenate(parts, axis=0)
        return (x, z) if return_noise else x

    return sample
