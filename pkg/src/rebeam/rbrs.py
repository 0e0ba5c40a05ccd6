"""Random Beam Re-Sampling: whole-beam masking and inter-beam interpolation.

Down-sampling drops entire beams with density-proportional probabilities
(denser beams are more likely to go); up-sampling inserts an artificial beam
between neighbors with probabilities that favor sparse regions. Probabilities
follow mask = 1 - gamma1/D and insert = gamma2/D per beam/gap, clamped to
[0, 1] since the raw formulas leave the unit interval for extreme factors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .beam_model import BeamModel, fit_beam_model
from .errors import EmptyBeam, SingleBeam
from .geometry import cartesian_to_spherical, spherical_to_cartesian, wrap_angle

MODES = ("downsample", "upsample", "passthrough")


@dataclass(frozen=True)
class DownsampleConfig:
    """gamma1 (beams/radian) sets the overall density kept when masking."""

    gamma1: float = 75.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma1) and self.gamma1 > 0):
            raise ValueError("gamma1 must be finite and > 0")


@dataclass(frozen=True)
class UpsampleConfig:
    """gamma2 (beams/radian) scales interpolation; larger means more new beams."""

    gamma2: float = 25.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma2) and self.gamma2 > 0):
            raise ValueError("gamma2 must be finite and > 0")


@dataclass(frozen=True)
class RbrsConfig:
    mode: str = "passthrough"
    down: DownsampleConfig = field(default_factory=DownsampleConfig)
    up: UpsampleConfig = field(default_factory=UpsampleConfig)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def _require_densities(model: BeamModel) -> np.ndarray:
    if model.densities is None:
        raise ValueError("BeamModel has no densities; use fit_beam_model")
    return model.densities


def mask_probabilities(model: BeamModel, gamma1: float) -> np.ndarray:
    """Per-beam masking probability: clamp(1 - gamma1 / D(j), 0, 1)."""
    densities = _require_densities(model)
    return np.clip(1.0 - gamma1 / densities, 0.0, 1.0)


def interp_probabilities(model: BeamModel, gamma2: float) -> np.ndarray:
    """Per-gap insertion probability: clamp(gamma2 / D(j), 0, 1) for gaps j, j+1."""
    if model.beam_count < 2:
        raise SingleBeam("gap probabilities need at least 2 beams")
    densities = _require_densities(model)
    return np.clip(gamma2 / densities[:-1], 0.0, 1.0)


def downsample(
    cloud: np.ndarray, model: BeamModel, cfg: DownsampleConfig, seed: int
) -> np.ndarray:
    """Drop whole beams independently with their masking probabilities.

    Survivors are returned bit-identical and in input order. Each beam's
    Bernoulli draw comes from its own (seed, beam) stream, so the draw for one
    beam never depends on any other beam.
    """
    probs = mask_probabilities(model, cfg.gamma1)
    dropped = np.zeros(model.beam_count, dtype=bool)
    for j in range(model.beam_count):
        dropped[j] = rng.stream(seed, rng.MASK, j).random() < probs[j]
    keep = ~dropped[model.assignments]
    return cloud[keep]


def interpolate_gap(cloud: np.ndarray, model: BeamModel, gap: int) -> np.ndarray:
    """Synthesize one artificial beam between beams ``gap`` and ``gap + 1``.

    Every point k of the lower beam is paired with the upper-beam point
    closest in circular azimuth (ties to the lower index); the new point is
    the spherical midpoint of the pair, with the azimuth midpoint taken along
    the shorter arc and intensity averaged.

    Raises:
        EmptyBeam: if either bounding beam has no points.
    """
    lower = model.points_in_beam(gap)
    upper = model.points_in_beam(gap + 1)
    if len(lower) == 0 or len(upper) == 0:
        raise EmptyBeam(f"gap {gap} touches an empty beam")
    sph = cartesian_to_spherical(cloud[np.concatenate([lower, upper])])
    sph_lo, sph_hi = sph[: len(lower)], sph[len(lower):]

    # Circular azimuth distance matrix, lower beam x upper beam.
    delta = wrap_angle(sph_hi[None, :, 1] - sph_lo[:, None, 1])
    nearest = np.argmin(np.abs(delta), axis=1)  # argmin ties -> lower index
    mate = sph_hi[nearest]

    mid = np.empty_like(sph_lo)
    mid[:, 0] = 0.5 * (sph_lo[:, 0] + mate[:, 0])
    mid[:, 1] = wrap_angle(sph_lo[:, 1] + 0.5 * delta[np.arange(len(lower)), nearest])
    mid[:, 2] = 0.5 * (sph_lo[:, 2] + mate[:, 2])
    mid[:, 3] = 0.5 * (sph_lo[:, 3] + mate[:, 3])
    return spherical_to_cartesian(mid)


def upsample(
    cloud: np.ndarray, model: BeamModel, cfg: UpsampleConfig, seed: int
) -> np.ndarray:
    """Insert artificial beams gap by gap with their insertion probabilities.

    Original points come first, bit-identical; inserted points follow in gap
    order. Gaps touching an empty beam are skipped.
    """
    probs = interp_probabilities(model, cfg.gamma2)
    inserted = []
    for gap in range(model.beam_count - 1):
        if rng.stream(seed, rng.INTERPOLATE, gap).random() >= probs[gap]:
            continue
        if len(model.points_in_beam(gap)) == 0 or len(model.points_in_beam(gap + 1)) == 0:
            continue
        inserted.append(interpolate_gap(cloud, model, gap).astype(cloud.dtype))
    if not inserted:
        return cloud.copy()
    return np.vstack([cloud] + inserted)


def apply_rbrs(cloud: np.ndarray, beam_count: int, cfg: RbrsConfig) -> np.ndarray:
    """Cluster beams, estimate densities, and dispatch on the configured mode."""
    if cfg.mode == "passthrough":
        return cloud
    model = fit_beam_model(cloud, beam_count)
    if cfg.mode == "downsample":
        return downsample(cloud, model, cfg.down, cfg.seed)
    return upsample(cloud, model, cfg.up, cfg.seed)
