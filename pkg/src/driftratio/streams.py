"""Synthetic shifting-Gaussian streams with full oracle access.

Two scenarios are generated. The single-origin stream starts at
N(mean0, std0^2 I) and drifts by a constant per-step change of mean and
std. The multi-origin stream introduces one new origin N(2*tau, I) per
step; every joined origin then drifts independently with the same
per-step deltas.

Sampling is keyed by (seed, purpose, origin, step) substreams, so batches
are reproducible and adding origins or evaluation consumers never changes
the draws of existing ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergences import GaussianSpec
from .seeding import substream


def sample_gaussian(spec: GaussianSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws, shape (n, dim)."""
    if n <= 0:
        raise ValueError("sample size must be positive")
    return spec.mean + spec.std * rng.standard_normal((n, spec.dim))


@dataclass(frozen=True)
class SingleStreamConfig:
    """Linear drift schedule for one original distribution.

    Step 0 is the original distribution itself; at step k the mean is
    mean0 + d_mean*k per dimension and the std is std0 - d_std*k. Shift
    accumulates every step regardless of how often an estimator fires;
    estimation_interval only controls the default checkpoint spacing.
    """

    dim: int = 8
    mean0: float = 0.0
    std0: float = 1.0
    d_mean: float = 0.02
    d_std: float = 0.02
    total_steps: int = 10
    estimation_interval: int = 1
    samples_per_step: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.total_steps < 1 or self.samples_per_step < 1:
            raise ValueError("dim, total_steps, samples_per_step must be positive")
        if self.estimation_interval < 1:
            raise ValueError("estimation_interval must be positive")
        if self.std0 - self.d_std * self.total_steps <= 0:
            raise ValueError(
                f"std would reach {self.std0 - self.d_std * self.total_steps:.4g} "
                f"by step {self.total_steps}; shrink d_std or total_steps"
            )


def spec_at(config: SingleStreamConfig, step: int) -> GaussianSpec:
    """Distribution of the stream at a given step (0 = the original)."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside 0..{config.total_steps}")
    std = config.std0 - config.d_std * step
    if std <= 0:
        raise ValueError(f"std is not positive at step {step}")
    return GaussianSpec.isotropic(config.dim, config.mean0 + config.d_mean * step, std)


@dataclass(frozen=True)
class MultiStreamConfig:
    """One new origin per step at mean 2*tau, then per-origin linear drift."""

    dim: int = 8
    n_origins: int = 5
    d_mean: float = 0.01
    d_std: float = 0.01
    total_steps: int = 10
    samples_per_step: int = 5000
    seed: int = 0
    origin_spacing: float = 2.0
    origin_std: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or self.n_origins < 1 or self.samples_per_step < 1:
            raise ValueError("dim, n_origins, samples_per_step must be positive")
        if self.total_steps < self.n_origins:
            raise ValueError("total_steps must cover all origin join times")
        if self.origin_std - self.d_std * self.total_steps <= 0:
            raise ValueError("std would reach zero within total_steps")


def multi_spec_at(config: MultiStreamConfig, origin: int, step: int) -> GaussianSpec:
    """Dynamic distribution of origin tau at time step >= tau."""
    if not 1 <= origin <= config.n_origins:
        raise ValueError(f"origin {origin} outside 1..{config.n_origins}")
    if step < origin:
        raise ValueError(f"origin {origin} has not joined yet at step {step}")
    elapsed = step - origin
    return GaussianSpec.isotropic(
        config.dim,
        config.origin_spacing * origin + config.d_mean * elapsed,
        config.origin_std - config.d_std * elapsed,
    )


def stream_batch(
    spec: GaussianSpec, n: int, seed: int, purpose: int, origin: int, step: int
) -> np.ndarray:
    """Deterministic batch for a (purpose, origin, step) slot of a stream."""
    return sample_gaussian(spec, n, substream(seed, purpose, origin, step))


def dump_batch(path, batch: np.ndarray, dim: int, step: int, origin: int) -> None:
    """Write one batch as comma-separated text for external cross-checks.

    First line records dim/step/origin; every following line is one sample.
    """
    batch = np.asarray(batch, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"dim={dim},step={step},origin={origin}\n")
        for row in batch:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_batch(path):
    """Read a batch written by :func:`dump_batch`; returns (meta, array)."""
    with open(path) as fh:
        header = fh.readline().strip()
        meta = dict(part.split("=") for part in header.split(","))
        meta = {k: int(v) for k, v in meta.items()}
        rows = [
            [float(v) for v in line.split(",")] for line in fh if line.strip()
        ]
    return meta, np.array(rows, dtype=np.float64)
