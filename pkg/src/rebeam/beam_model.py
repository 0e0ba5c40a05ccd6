"""Beam assignment by 1-D K-Means on zenith angles, and per-beam densities.

A beam is the set of returns sharing one laser's (approximately constant)
zenith angle. Beam density is the reciprocal of the zenith gap to the next
beam, in beams per radian.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import SingleBeam, TooFewDistinctZeniths
from .geometry import cartesian_to_spherical

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-7
# Distinct zenith values closer than this are floating-point noise, not beams.
MERGE_TOL = 1e-12


@dataclass(frozen=True)
class BeamModel:
    """Per-point beam assignments against sorted beam zenith centers.

    ``densities`` is filled by :func:`beam_density`; ``converged`` records
    whether K-Means reached its tolerance within the iteration budget
    (a best-effort result is returned either way).
    """

    centers: np.ndarray
    assignments: np.ndarray
    converged: bool
    densities: np.ndarray | None = None

    @property
    def beam_count(self) -> int:
        return len(self.centers)

    def points_in_beam(self, j: int) -> np.ndarray:
        """Indices of the points assigned to beam ``j``, in input order."""
        return np.flatnonzero(self.assignments == j)


def _assign(zeniths: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest sorted center per value; exact midpoints go to the lower index."""
    mids = 0.5 * (centers[:-1] + centers[1:])
    return np.searchsorted(mids, zeniths, side="left")


def cluster_beams(
    cloud: np.ndarray,
    beam_count: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> BeamModel:
    """1-D K-Means over point zeniths with deterministic quantile seeding.

    Seeds are quantiles of the sorted distinct zenith values (no RNG), so
    results are reproducible and independent of point order. Iteration stops
    when the largest center movement drops below ``tol`` or after
    ``max_iters`` sweeps, whichever comes first.

    Raises:
        TooFewDistinctZeniths: fewer distinct zenith values than beams.
    """
    if beam_count < 1:
        raise ValueError("beam_count must be >= 1")
    zeniths = cartesian_to_spherical(cloud)[:, 0]
    distinct, counts_per_value = np.unique(zeniths, return_counts=True)
    counts_per_value = counts_per_value.astype(np.float64)

    # Collapse rounding-noise duplicates (points of one laser differ by a few
    # ulps) so seeding sees true zenith levels; real jitter is far above this.
    if len(distinct) > 1:
        groups = np.concatenate([[0], np.cumsum(np.diff(distinct) > MERGE_TOL)])
        if groups[-1] + 1 < len(distinct):
            mass = np.bincount(groups, weights=counts_per_value)
            distinct = np.bincount(groups, weights=distinct * counts_per_value) / mass
            counts_per_value = mass
    if len(distinct) < beam_count:
        raise TooFewDistinctZeniths(
            f"{len(distinct)} distinct zenith value(s) < {beam_count} beams"
        )

    # Quantile seeds over the distinct values are themselves distinct.
    seed_idx = ((np.arange(beam_count) + 0.5) * len(distinct) / beam_count).astype(int)
    centers = distinct[seed_idx].astype(np.float64)

    # Lloyd iterations run on the sorted distinct values with multiplicity
    # weights: value-based assignment plus order-fixed weighted sums make the
    # result permutation-invariant by construction.

    converged = False
    for _ in range(max_iters):
        idx = _assign(distinct, centers)
        weight = np.bincount(idx, weights=counts_per_value, minlength=beam_count)
        total = np.bincount(idx, weights=counts_per_value * distinct, minlength=beam_count)
        new_centers = centers.copy()  # empty clusters keep their center
        nonempty = weight > 0
        new_centers[nonempty] = total[nonempty] / weight[nonempty]
        shift = np.max(np.abs(new_centers - centers))
        centers = new_centers
        if shift < tol:
            converged = True
            break

    order = np.argsort(centers, kind="stable")
    centers = centers[order]
    assignments = _assign(zeniths, centers)
    return BeamModel(centers=centers, assignments=assignments, converged=converged)


def beam_density(model: BeamModel) -> np.ndarray:
    """Per-beam density D(j) = 1 / (center(j+1) - center(j)), beams per radian.

    The top beam has no next neighbor and reuses the final gap's density.

    Raises:
        SingleBeam: density is undefined for fewer than two beams.
    """
    if model.beam_count < 2:
        raise SingleBeam("beam density needs at least 2 beams")
    gaps = np.diff(model.centers)
    if np.any(gaps <= 0):
        raise ValueError("beam centers must be strictly increasing")
    densities = np.empty(model.beam_count)
    densities[:-1] = 1.0 / gaps
    densities[-1] = densities[-2]
    return densities


def fit_beam_model(
    cloud: np.ndarray,
    beam_count: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> BeamModel:
    """Cluster beams and attach densities in one step."""
    model = cluster_beams(cloud, beam_count, max_iters=max_iters, tol=tol)
    if beam_count < 2:
        return model
    return replace(model, densities=beam_density(model))
