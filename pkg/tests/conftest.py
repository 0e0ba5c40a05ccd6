"""Shared fixtures and independent oracle helpers for the test suite."""

import numpy as np
import pytest

from rebeam.geometry import BevBox
from rebeam.object_graph import BoxPrediction
from rebeam.scene_synth import uniform_beams


def synthetic_beam_cloud(
    beam_count: int,
    points_per_beam: int = 40,
    jitter_frac: float = 0.0,
    zenith_min: float = np.radians(-24.0),
    zenith_max: float = np.radians(2.0),
    seed: int = 0,
):
    """Cloud with known beam ids: rows of constant zenith, optional jitter.

    ``jitter_frac`` scales the inter-beam gap; returns (cloud, true_ids,
    zeniths).
    """
    rng = np.random.default_rng(seed)
    zeniths = uniform_beams(beam_count, zenith_min, zenith_max)
    gap = zeniths[1] - zeniths[0]
    rows = []
    ids = []
    for j, zen in enumerate(zeniths):
        z = zen + rng.uniform(-0.5, 0.5, points_per_beam) * gap * jitter_frac
        azi = rng.uniform(-np.pi, np.pi, points_per_beam)
        rad = rng.uniform(5.0, 50.0, points_per_beam)
        rows.append(
            np.column_stack([
                rad * np.cos(z) * np.cos(azi),
                rad * np.cos(z) * np.sin(azi),
                rad * np.sin(z),
                np.full(points_per_beam, 0.5),
            ])
        )
        ids.append(np.full(points_per_beam, j))
    return np.vstack(rows), np.concatenate(ids), zeniths


def random_box(rng, spread: float = 10.0) -> BevBox:
    return BevBox(
        cx=float(rng.uniform(-spread, spread)),
        cy=float(rng.uniform(-spread, spread)),
        length=float(rng.uniform(0.5, 5.0)),
        width=float(rng.uniform(0.5, 5.0)),
        yaw=float(rng.uniform(-np.pi, np.pi)),
    )


def random_box_pair(rng):
    """Pair with a decent chance of overlap (second box near the first)."""
    a = random_box(rng)
    b = BevBox(
        cx=a.cx + float(rng.uniform(-3.0, 3.0)),
        cy=a.cy + float(rng.uniform(-3.0, 3.0)),
        length=float(rng.uniform(0.5, 5.0)),
        width=float(rng.uniform(0.5, 5.0)),
        yaw=float(rng.uniform(-np.pi, np.pi)),
    )
    return a, b


def monte_carlo_iou(a: BevBox, b: BevBox, samples_per_side: int = 1000, seed: int = 0):
    """Stratified Monte-Carlo IoU: jittered grid over box a, hit-test box b."""
    rng = np.random.default_rng(seed)
    n = samples_per_side
    u = (np.arange(n) + rng.random(n)) / n
    v = (np.arange(n) + rng.random(n)) / n
    uu, vv = np.meshgrid(u, v, indexing="ij")
    local = np.column_stack([
        (uu.ravel() - 0.5) * a.length,
        (vv.ravel() - 0.5) * a.width,
    ])
    ca, sa = np.cos(a.yaw), np.sin(a.yaw)
    world = local @ np.array([[ca, sa], [-sa, ca]]) + [a.cx, a.cy]
    # into b's frame
    cb, sb = np.cos(b.yaw), np.sin(b.yaw)
    rel = world - [b.cx, b.cy]
    bx = rel[:, 0] * cb + rel[:, 1] * sb
    by = -rel[:, 0] * sb + rel[:, 1] * cb
    inside = (np.abs(bx) <= 0.5 * b.length) & (np.abs(by) <= 0.5 * b.width)
    inter = inside.mean() * a.length * a.width
    union = a.length * a.width + b.length * b.width - inter
    return inter / union


def shapely_iou(a: BevBox, b: BevBox) -> float:
    """Independent rotated-IoU via shapely's polygon clipping."""
    from shapely.geometry import Polygon

    pa = Polygon(a.corners())
    pb = Polygon(b.corners())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def pairwise_glr(weights: np.ndarray, features: np.ndarray) -> float:
    """Independent smoothness oracle: sum over pairs of w_ij |f_i - f_j|^2."""
    n = len(weights)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            diff = features[i] - features[j]
            total += weights[i, j] * float(diff @ diff)
    return total


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(np.linalg.norm(got), np.linalg.norm(want), 1e-300)
    return float(np.linalg.norm(np.asarray(got) - np.asarray(want)) / scale)


def random_predictions(rng, count: int, feature_dim: int = 8, confidence=0.9):
    """Random box predictions with features, for graph-loss tests."""
    preds = []
    for _ in range(count):
        preds.append(
            BoxPrediction(
                center=rng.normal(scale=10.0, size=3),
                size=1.0 + rng.random(3) * 3.0,
                yaw=float(rng.uniform(-np.pi, np.pi)),
                class_id=0,
                confidence=confidence,
                feature=rng.normal(size=feature_dim),
            )
        )
    return preds


@pytest.fixture(scope="session")
def beam_cloud_64():
    return synthetic_beam_cloud(64, points_per_beam=40, jitter_frac=0.05, seed=1)
