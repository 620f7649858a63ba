"""Simulated depth camera and mapper: ray-cast depth scans, gradient-based
depth filtering, and occupancy integration.

Stands in for an RGBD + SLAM stack: the environment is a set of wall
segments, a scan is a fan of rays relative to the robot heading, and
integration carves Free corridors and Occupied hits into a grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import FREE, OCCUPIED, OccupancyGrid, OutOfBoundsError

ENV_SCHEMA = "prednav-env-1"

# 1-D derivative-of-smoothing kernel standing in for an image Sobel; applied
# over the angular axis with edge replication so constant and linear scans
# stay below the 2x-median discard threshold everywhere.
GRADIENT_KERNEL = np.array([-1.0, -2.0, 0.0, 2.0, 1.0]) / 8.0


class EnvironmentFormatError(ValueError):
    """Malformed environment file."""


@dataclass(frozen=True)
class Environment:
    """Static world: wall segments [(x1, y1, x2, y2), ...] plus a bounding box."""

    walls: np.ndarray
    bounds: tuple[float, float, float, float]

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=float).reshape(-1, 4)
        walls.flags.writeable = False
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        xmin, ymin, xmax, ymax = self.bounds
        if xmin >= xmax or ymin >= ymax:
            raise ValueError("degenerate bounds")

    def contains(self, p) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def wall_distance(self, p) -> float:
        """Distance from p to the nearest wall segment (inf when no walls)."""
        if len(self.walls) == 0:
            return float("inf")
        return float(np.min(_point_segment_distances(np.asarray(p, float), self.walls)))


def _point_segment_distances(p, walls):
    a = walls[:, 0:2]
    b = walls[:, 2:4]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.zeros(len(walls))
    nz = denom > 0
    t[nz] = np.clip(((p - a[nz]) * ab[nz]).sum(axis=1) / denom[nz], 0.0, 1.0)
    closest = a + t[:, None] * ab
    d = closest - p
    return np.sqrt((d * d).sum(axis=1))


def save_environment(env: Environment, path):
    doc = {
        "schema": ENV_SCHEMA,
        "bounds": list(env.bounds),
        "walls": [list(map(float, w)) for w in env.walls],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_environment(path) -> Environment:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != ENV_SCHEMA:
        raise EnvironmentFormatError(f"unsupported environment schema: {doc.get('schema')!r}")
    try:
        return Environment(np.array(doc["walls"], dtype=float).reshape(-1, 4), tuple(doc["bounds"]))
    except (KeyError, ValueError) as e:
        raise EnvironmentFormatError(f"bad environment file: {e}") from e


@dataclass
class SensorConfig:
    fov: float = 1.5  # rad, D435-like horizontal field of view
    ray_count: int = 128
    max_range: float = 3.0  # m, deliberately limited depth range
    depth_noise_sigma: float = 0.0  # m

    def __post_init__(self):
        if not 0 < self.fov <= 2 * np.pi:
            raise ValueError("fov must be in (0, 2*pi]")
        if self.ray_count < 1 or self.max_range <= 0 or self.depth_noise_sigma < 0:
            raise ValueError("bad sensor config")


@dataclass
class DepthScan:
    """Fan of depth readings; angles are relative to the robot heading.

    ``valid`` marks usable returns. ``discarded`` marks rays dropped by the
    gradient filter: unlike out-of-range rays (which genuinely saw free
    space up to the range cutoff) these carry no information at all.
    """

    angles: np.ndarray
    depths: np.ndarray
    valid: np.ndarray
    max_range: float
    discarded: np.ndarray | None = None

    def __post_init__(self):
        if self.discarded is None:
            self.discarded = np.zeros(len(self.depths), dtype=bool)


def render_depth(env: Environment, pose, cfg: SensorConfig, rng=None) -> DepthScan:
    """Nearest wall intersection per ray; rays beyond max_range are invalid.

    ``pose`` is anything with x, y, theta attributes. With ``rng`` given and
    a positive noise sigma, valid depths get additive Gaussian noise clipped
    into (0, max_range].
    """
    if not env.contains((pose.x, pose.y)):
        raise OutOfBoundsError("sensor pose outside environment bounds")
    angles = np.linspace(-cfg.fov / 2, cfg.fov / 2, cfg.ray_count)
    world = angles + pose.theta
    dirs = np.column_stack([np.cos(world), np.sin(world)])
    depths = np.full(cfg.ray_count, np.inf)

    if len(env.walls) > 0:
        o = np.array([pose.x, pose.y])
        a = env.walls[:, 0:2]
        ab = env.walls[:, 2:4] - a
        # Solve o + t*d = a + s*ab for each (ray, wall) pair.
        # t = cross(a - o, ab) / cross(d, ab); s = cross(a - o, d) / cross(d, ab)
        ao = a - o  # (W, 2)
        denom = dirs[:, 0:1] * ab[None, :, 1] - dirs[:, 1:2] * ab[None, :, 0]  # (R, W)
        cross_ao_ab = ao[:, 0] * ab[:, 1] - ao[:, 1] * ab[:, 0]  # (W,)
        cross_ao_d = ao[None, :, 0] * dirs[:, 1:2] - ao[None, :, 1] * dirs[:, 0:1]  # (R, W)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = cross_ao_ab[None, :] / denom
            s = cross_ao_d / denom
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
        t = np.where(hit, t, np.inf)
        depths = t.min(axis=1)

    valid = depths <= cfg.max_range
    depths = np.where(valid, depths, np.inf)
    if rng is not None and cfg.depth_noise_sigma > 0:
        noise = rng.normal(0.0, cfg.depth_noise_sigma, size=cfg.ray_count)
        noisy = np.clip(depths[valid] + noise[valid], 1e-6, cfg.max_range)
        depths = depths.copy()
        depths[valid] = noisy
    return DepthScan(angles=angles, depths=depths, valid=valid, max_range=cfg.max_range)


def gradient_filter(scan: DepthScan) -> DepthScan:
    """Drop rays whose angular depth gradient exceeds twice the median.

    Invalid rays contribute max_range to their neighbors' stencils but are
    excluded from the median and never re-validated. Suppresses ghost
    readings near depth discontinuities.
    """
    n = len(scan.depths)
    if n < 5:
        raise ValueError("gradient filter needs at least 5 rays")
    filled = np.where(scan.valid, scan.depths, scan.max_range)
    padded = np.pad(filled, 2, mode="edge")
    mags = np.abs(np.convolve(padded, GRADIENT_KERNEL[::-1], mode="valid"))
    if not scan.valid.any():
        return scan
    median = float(np.median(mags[scan.valid]))
    keep = scan.valid & ~(mags > 2.0 * median)
    depths = np.where(keep, scan.depths, np.inf)
    discarded = scan.discarded | (scan.valid & ~keep)
    return DepthScan(
        angles=scan.angles, depths=depths, valid=keep, max_range=scan.max_range,
        discarded=discarded,
    )


def integrate_scan(
    g: OccupancyGrid, pose, scan: DepthScan, free_fraction: float = 0.9
) -> OccupancyGrid:
    """Carve a scan into the grid and return the updated grid.

    Valid rays mark cells strictly before the hit Free and the hit cell
    Occupied; invalid rays clear up to max_range * free_fraction. Occupied
    wins over Free within the scan, and existing Occupied cells are never
    demoted (occupancy is absorbing, which keeps integration monotone).
    """
    if not g.contains((pose.x, pose.y)):
        raise OutOfBoundsError("pose outside grid extent")
    res = g.resolution
    step = res / 2.0
    world = scan.angles + pose.theta
    dirs = np.column_stack([np.cos(world), np.sin(world)])
    o = np.array([pose.x, pose.y])

    free_pts = []
    occ_pts = []
    for i in range(len(scan.depths)):
        if scan.valid[i]:
            hit_t = float(scan.depths[i])
            ts = np.arange(0.0, hit_t, step)
            pts = o + ts[:, None] * dirs[i]
            hit_pt = o + hit_t * dirs[i]
            occ_pts.append(hit_pt)
            free_pts.append(pts)
        elif not scan.discarded[i]:
            # out-of-range rays saw free space up to the cutoff; rays the
            # gradient filter dropped contribute nothing
            reach = scan.max_range * free_fraction
            if reach > 0:
                ts = np.arange(0.0, reach + step / 2, step)
                free_pts.append(o + ts[:, None] * dirs[i])

    cells = g.mutable_cells()
    ox, oy = g.origin

    def to_idx(pts):
        ix = np.floor((pts[:, 0] - ox) / res).astype(int)
        iy = np.floor((pts[:, 1] - oy) / res).astype(int)
        ok = (ix >= 0) & (ix < g.width) & (iy >= 0) & (iy < g.height)
        return ix[ok], iy[ok]

    occ_mask = np.zeros(cells.shape, dtype=bool)
    if occ_pts:
        ox_i, oy_i = to_idx(np.array(occ_pts).reshape(-1, 2))
        occ_mask[oy_i, ox_i] = True
    if free_pts:
        fx, fy = to_idx(np.concatenate(free_pts))
        free_mask = np.zeros(cells.shape, dtype=bool)
        free_mask[fy, fx] = True
        # hit cells from this scan and previously occupied cells survive
        cells[free_mask & ~occ_mask & (cells != OCCUPIED)] = FREE
    cells[occ_mask] = OCCUPIED
    return g.with_cells(cells)
