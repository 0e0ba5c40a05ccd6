"""Coordinate transforms, range-image projection, and rotated BEV IoU.

Point clouds are ``(N, 4)`` float arrays with columns ``[x, y, z, intensity]``.
Spherical clouds are ``(N, 4)`` arrays with columns
``[zenith, azimuth, range, intensity]`` (radians, radians, meters).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePoint, EmptyCloud

# Horizontal radius below which the azimuth of a return is undefined.
MIN_HORIZONTAL_RADIUS = 1e-9


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return np.mod(np.asarray(angle) + np.pi, 2.0 * np.pi) - np.pi


def cartesian_to_spherical(cloud: np.ndarray) -> np.ndarray:
    """Convert an (N, 4) Cartesian cloud to spherical coordinates.

    zenith = arctan(z / sqrt(x^2 + y^2)) is the elevation above the sensor's
    horizontal plane; azimuth is the full-quadrant arctangent of (y, x), so the
    transform is invertible over the whole circle; range is the Euclidean
    distance to the sensor.

    Raises:
        DegeneratePoint: if any point has horizontal radius < 1e-9 m.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    x, y, z = cloud[:, 0], cloud[:, 1], cloud[:, 2]
    rho = np.hypot(x, y)
    bad = rho < MIN_HORIZONTAL_RADIUS
    if np.any(bad):
        raise DegeneratePoint(
            f"{int(bad.sum())} point(s) within {MIN_HORIZONTAL_RADIUS} m of the "
            f"sensor axis (first at index {int(np.argmax(bad))})"
        )
    out = np.empty_like(cloud)
    out[:, 0] = np.arctan2(z, rho)
    out[:, 1] = np.arctan2(y, x)
    out[:, 2] = np.sqrt(x * x + y * y + z * z)
    out[:, 3] = cloud[:, 3]
    return out


def spherical_to_cartesian(sph: np.ndarray) -> np.ndarray:
    """Invert :func:`cartesian_to_spherical` for an (N, 4) spherical cloud."""
    sph = np.asarray(sph, dtype=np.float64)
    zen, azi, rng = sph[:, 0], sph[:, 1], sph[:, 2]
    cos_zen = np.cos(zen)
    out = np.empty_like(sph)
    out[:, 0] = rng * cos_zen * np.cos(azi)
    out[:, 1] = rng * cos_zen * np.sin(azi)
    out[:, 2] = rng * np.sin(zen)
    out[:, 3] = sph[:, 3]
    return out


def degenerate_mask(cloud: np.ndarray) -> np.ndarray:
    """Boolean mask of points whose azimuth is undefined (filter-and-continue helper)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    return np.hypot(cloud[:, 0], cloud[:, 1]) < MIN_HORIZONTAL_RADIUS


@dataclass(frozen=True)
class RangeImage:
    """Dense (zenith bin, azimuth bin) grid of nearest returns.

    Empty cells hold NaN range/intensity and index -1. ``indices`` maps each
    occupied cell back to the row of the source cloud it came from.
    """

    rows: int
    cols: int
    zenith_min: float
    zenith_max: float
    ranges: np.ndarray
    intensities: np.ndarray
    indices: np.ndarray


def project_range_image(cloud: np.ndarray, rows: int, cols: int) -> RangeImage:
    """Bin a cloud into a range image; on collisions the nearer return wins.

    Zenith bins uniformly cover the observed zenith span of the cloud
    (half-open bins, final bin closed); azimuth bins cover [-pi, pi).
    Equal-range collisions keep the earlier point.

    Raises:
        EmptyCloud: if the cloud has no points.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape[0] == 0:
        raise EmptyCloud("cannot project an empty cloud")
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")

    sph = cartesian_to_spherical(cloud)
    zen, azi, rng = sph[:, 0], sph[:, 1], sph[:, 2]
    zmin, zmax = float(zen.min()), float(zen.max())
    span = zmax - zmin
    if span == 0.0:
        ri = np.zeros(len(zen), dtype=np.intp)
    else:
        ri = np.floor((zen - zmin) / span * rows).astype(np.intp)
        np.clip(ri, 0, rows - 1, out=ri)  # zen == zmax lands in the last bin
    ci = np.floor((azi + np.pi) / (2.0 * np.pi) * cols).astype(np.intp)
    np.clip(ci, 0, cols - 1, out=ci)

    ranges = np.full((rows, cols), np.nan)
    intens = np.full((rows, cols), np.nan)
    indices = np.full((rows, cols), -1, dtype=np.int64)
    for i in range(cloud.shape[0]):
        r, c = ri[i], ci[i]
        if indices[r, c] < 0 or rng[i] < ranges[r, c]:
            ranges[r, c] = rng[i]
            intens[r, c] = sph[i, 3]
            indices[r, c] = i
    return RangeImage(rows, cols, zmin, zmax, ranges, intens, indices)


@dataclass(frozen=True)
class BevBox:
    """Rotated rectangle in the bird's-eye-view plane (meters, radians)."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float

    def corners(self) -> np.ndarray:
        """Counter-clockwise (4, 2) corner array."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        dx, dy = 0.5 * self.length, 0.5 * self.width
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    for (x0, y0), (x1, y1) in zip(poly, poly[1:] + poly[:1]):
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of a convex CCW subject against a convex CCW polygon.

    The side test uses the difference form so a vertex shared with a clip edge
    evaluates to exactly zero and is kept; degenerate overlaps therefore clip
    to zero-area polygons instead of slivers.
    """
    output = list(subject)
    for (ex0, ey0), (ex1, ey1) in zip(clip, clip[1:] + clip[:1]):
        if len(output) < 3:
            return []
        dx, dy = ex1 - ex0, ey1 - ey0
        inside = [dx * (py - ey0) - dy * (px - ex0) for px, py in output]
        clipped = []
        for i, (p, side_p) in enumerate(zip(output, inside)):
            q = output[(i + 1) % len(output)]
            side_q = inside[(i + 1) % len(output)]
            if side_p >= 0.0:
                clipped.append(p)
            if (side_p > 0.0 > side_q) or (side_q > 0.0 > side_p):
                t = side_p / (side_p - side_q)
                clipped.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
        output = clipped
    return output


def rotated_bev_iou(a: BevBox, b: BevBox) -> float:
    """Exact IoU of two rotated BEV rectangles via convex polygon clipping.

    Symmetric in its arguments (a canonical argument order is applied
    internally) and invariant under common rigid transforms up to rounding;
    touching or collinear edges count as zero-area intersection.
    """
    # Canonical order makes iou(a, b) and iou(b, a) bit-identical.
    ka = (a.cx, a.cy, a.length, a.width, a.yaw)
    kb = (b.cx, b.cy, b.length, b.width, b.yaw)
    if kb < ka:
        a, b = b, a
    # Work in a local frame around the midpoint for translation robustness.
    mx, my = 0.5 * (a.cx + b.cx), 0.5 * (a.cy + b.cy)
    ca = (a.corners() - [mx, my]).tolist()
    cb = (b.corners() - [mx, my]).tolist()
    ca = [tuple(p) for p in ca]
    cb = [tuple(p) for p in cb]
    inter = max(_polygon_area(_clip_polygon(ca, cb)), 0.0)
    # Shoelace areas of the same corner lists keep identical boxes at IoU == 1.0.
    area_a = _polygon_area(ca)
    area_b = _polygon_area(cb)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)
