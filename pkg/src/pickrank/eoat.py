"""Suction end-of-arm tool, pick sampling and the two pick filters."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError
from .seeding import derive_seed

CENTER = "center"
RANDOM = "random"
POLICIES = (CENTER, RANDOM)
YAWS = (0.0, math.pi / 4)


def x_layout(outer=0.105, inner=0.0525):
    """Eight cups on the two diagonals of the plate: outer corners, then inner."""
    quad = ((1, 1), (-1, 1), (-1, -1), (1, -1))
    return tuple((sx * outer, sy * outer) for sx, sy in quad) + tuple(
        (sx * inner, sy * inner) for sx, sy in quad
    )


@dataclass(frozen=True)
class EoATModel:
    cup_offsets: tuple = field(default_factory=x_layout)
    cup_radius: float = 0.02
    plate_size: float = 0.25
    seal_tolerance: float = 0.01
    individually_controllable: bool = True

    def __post_init__(self):
        offsets = tuple((float(x), float(y)) for x, y in self.cup_offsets)
        object.__setattr__(self, "cup_offsets", offsets)
        if len(offsets) != 8:
            raise ConfigError("the tool has exactly 8 suction cups")
        half = self.plate_size / 2.0
        if any(abs(x) > half + 1e-12 or abs(y) > half + 1e-12 for x, y in offsets):
            raise ConfigError("cup offsets must lie within the plate square")

    @property
    def offsets_array(self):
        return np.asarray(self.cup_offsets)


@dataclass(frozen=True)
class WorkcellLimits:
    reach_center_xy: tuple = (0.8, 0.5)
    reach_radius: float = 0.85
    max_tilt: float = 0.5
    clearance: float = 0.02

    def __post_init__(self):
        if self.reach_radius <= 0:
            raise ConfigError("reach_radius must be positive")
        if not 0 < self.max_tilt < math.pi / 2:
            raise ConfigError("max_tilt must lie in (0, pi/2)")


@dataclass(frozen=True)
class Pick:
    pick_id: int
    segment_id: int
    package_id: int
    point: tuple  # contact point (x, y, z)
    axis: tuple  # tool z-axis, unit
    yaw: float  # rotation about the axis
    active_cups: tuple
    policy: str = CENTER

    @property
    def tilt(self):
        return math.acos(min(1.0, self.axis[2]))

    def to_dict(self):
        return {
            "pick_id": self.pick_id,
            "segment_id": self.segment_id,
            "package_id": self.package_id,
            "point": list(self.point),
            "axis": list(self.axis),
            "yaw": self.yaw,
            "active_cups": list(self.active_cups),
            "policy": self.policy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["pick_id"], d["segment_id"], d["package_id"], tuple(d["point"]),
            tuple(d["axis"]), d["yaw"], tuple(d["active_cups"]), d["policy"],
        )


@dataclass(frozen=True)
class CandidateSet:
    time_index: int
    picks: tuple


# -- tool geometry ------------------------------------------------------------

def tool_frames(axes, yaws):
    """In-plane unit vectors (f1, f2) of the tool for each (axis, yaw); shape (P, 3)."""
    axes = np.atleast_2d(np.asarray(axes, dtype=float))
    yaws = np.atleast_1d(np.asarray(yaws, dtype=float))
    nx, ny, nz = axes[:, 0], axes[:, 1], axes[:, 2]
    # x-hat minus its axial component, then e2 = axis x e1.
    e1x, e1y, e1z = 1.0 - nx * nx, -nx * ny, -nx * nz
    norm = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x, e1y, e1z = e1x / norm, e1y / norm, e1z / norm
    e2x = ny * e1z - nz * e1y
    e2y = nz * e1x - nx * e1z
    e2z = nx * e1y - ny * e1x
    c, s = np.cos(yaws), np.sin(yaws)
    f1 = np.stack([c * e1x + s * e2x, c * e1y + s * e2y, c * e1z + s * e2z], axis=1)
    f2 = np.stack([-s * e1x + c * e2x, -s * e1y + c * e2y, -s * e1z + c * e2z], axis=1)
    return f1, f2


def _frame(axis, yaw):
    """Scalar version of ``tool_frames`` for a single pose."""
    nx, ny, nz = axis
    e1x, e1y, e1z = 1.0 - nx * nx, -nx * ny, -nx * nz
    norm = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x, e1y, e1z = e1x / norm, e1y / norm, e1z / norm
    e2x = ny * e1z - nz * e1y
    e2y = nz * e1x - nx * e1z
    e2z = nx * e1y - ny * e1x
    c, s = math.cos(yaw), math.sin(yaw)
    f1 = (c * e1x + s * e2x, c * e1y + s * e2y, c * e1z + s * e2z)
    f2 = (-s * e1x + c * e2x, -s * e1y + c * e2y, -s * e1z + c * e2z)
    return f1, f2


def cup_positions(points, axes, yaws, eoat):
    """World positions of the cup centers, shape (P, 8, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    f1, f2 = tool_frames(axes, yaws)
    off = eoat.offsets_array
    return (
        points[:, None, :]
        + off[None, :, 0, None] * f1[:, None, :]
        + off[None, :, 1, None] * f2[:, None, :]
    )


def surface_under(cups, heightmap):
    """(flat cell index or -1, surface height) below each cup center."""
    cells = heightmap.cell_of(cups[..., 0], cups[..., 1])
    top = heightmap.top.ravel()
    surface = np.where(cells >= 0, top[np.maximum(cells, 0)], 0.0)
    return cells, surface


def _active_mask(cups, mask_lookup, heightmap, seal_tolerance):
    cells, surface = surface_under(cups, heightmap)
    in_mask = (cells >= 0) & mask_lookup[np.maximum(cells, 0)]
    return in_mask & (np.abs(cups[..., 2] - surface) <= seal_tolerance)


def _mask_lookup(segment, heightmap):
    lookup = np.zeros(heightmap.top.size, dtype=bool)
    lookup[segment.cells] = True
    return lookup


def compute_active_cups(pick, segment, plane, heightmap, eoat):
    """Cups whose centers land on the segment mask with the surface within seal tolerance.

    ``plane`` is accepted for interface symmetry; the pick pose already
    encodes it.
    """
    cups = cup_positions([pick.point], [pick.axis], [pick.yaw], eoat)
    active = _active_mask(cups, _mask_lookup(segment, heightmap), heightmap, eoat.seal_tolerance)
    return tuple(int(c) for c in np.nonzero(active[0])[0])


# -- sampling -----------------------------------------------------------------

def _sample_points(segment, plane, heightmap, policy, k, seed, max_tilt, radius):
    """Pick points, yaws and the shared axis for one segment (no cup evaluation)."""
    x, y = heightmap.centers(segment.cells)
    cx, cy = segment.centroid_xy
    d = np.hypot(x - cx, y - cy)
    rng = np.random.default_rng(seed)
    if policy == CENTER:
        idx = np.argsort(d, kind="stable")[:k]
    else:
        w = np.clip(1.0 - d / radius, 0.0, None)
        total = w.sum()
        if total > 0:
            idx = rng.choice(d.size, size=k, p=w / total)
        else:
            idx = np.full(k, int(np.argmin(d)))
    yaws = np.asarray(YAWS)[rng.integers(0, 2, size=idx.size)]
    px, py = x[idx], y[idx]
    pz = plane.z_at(px, py)
    axis = plane.unit_normal if plane.tilt <= max_tilt else (0.0, 0.0, 1.0)
    return np.stack([px, py, pz], axis=1), tuple(float(v) for v in axis), yaws


def _check_sampling_args(policy, k):
    if k < 1:
        raise ConfigError("k must be at least 1")
    if policy not in POLICIES:
        raise ConfigError(f"unknown pick policy {policy!r}")


def _make_picks(points, axes, yaws, active, seg_ids, pkg_ids, policy, first_id):
    picks = []
    for n in range(points.shape[0]):
        picks.append(Pick(
            pick_id=first_id + n,
            segment_id=int(seg_ids[n]),
            package_id=int(pkg_ids[n]),
            point=(float(points[n, 0]), float(points[n, 1]), float(points[n, 2])),
            axis=axes[n],
            yaw=float(yaws[n]),
            active_cups=tuple(np.flatnonzero(active[n]).tolist()),
            policy=policy,
        ))
    return picks


def sample_picks(segment, plane, heightmap, policy, k, seed, eoat,
                 max_tilt=0.5, radius=0.30, first_id=0):
    """Sample ``k`` picks on one segment.

    ``center`` takes the k mask cells nearest the centroid; ``random`` draws
    cells with weight falling linearly to zero at ``radius``. Each pick gets
    one of two yaws at random and sits on the fitted plane.
    """
    _check_sampling_args(policy, k)
    if plane.degenerate:
        return []
    points, axis, yaws = _sample_points(segment, plane, heightmap, policy, k, seed, max_tilt, radius)
    n = points.shape[0]
    cups = cup_positions(points, np.repeat([axis], n, axis=0), yaws, eoat)
    active = _active_mask(cups, _mask_lookup(segment, heightmap), heightmap, eoat.seal_tolerance)
    return _make_picks(points, [axis] * n, yaws, active, [segment.id] * n,
                       [segment.package_id] * n, policy, first_id)


# -- filters ------------------------------------------------------------------

def elementary_filter(picks, products):
    """Keep picks whose point is on their package's visible mask and with >= 1 active cup."""
    hm = products.heightmap
    time_index = products.scene.time_index
    picks = [p for p in picks if p.segment_id in products.segments and p.active_cups]
    if not picks:
        return CandidateSet(time_index, ())
    pts = np.array([p.point[:2] for p in picks])
    cells = hm.cell_of(pts[:, 0], pts[:, 1])
    owner = hm.owner.ravel()[np.maximum(cells, 0)]
    pkg = np.array([p.package_id for p in picks])
    keep = (cells >= 0) & (owner == pkg)
    return CandidateSet(time_index, tuple(p for p, k in zip(picks, keep) if k))


def plate_corners(pick, eoat):
    """World corners of the tool plate, shape (4, 3), counter-clockwise from (+, +)."""
    f1, f2 = _frame(pick.axis, pick.yaw)
    h = eoat.plate_size / 2.0
    px, py, pz = pick.point
    return np.array([
        (px + sx * h * f1[0] + sy * h * f2[0],
         py + sx * h * f1[1] + sy * h * f2[1],
         pz + sx * h * f1[2] + sy * h * f2[2])
        for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1))
    ])


def feasible_mask(picks, scene, heightmap, limits, eoat=EoATModel()):
    """Vectorized ``feasibility_filter`` over a list of picks."""
    n = len(picks)
    if n == 0:
        return np.zeros(0, dtype=bool)
    points = np.array([p.point for p in picks], dtype=float)
    axes = np.array([p.axis for p in picks], dtype=float)
    yaws = np.array([p.yaw for p in picks], dtype=float)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rx, ry = limits.reach_center_xy
    ok = np.hypot(x - rx, y - ry) <= limits.reach_radius
    ok &= np.arccos(np.minimum(1.0, axes[:, 2])) <= limits.max_tilt
    f1, f2 = tool_frames(axes, yaws)
    h = eoat.plate_size / 2.0
    # Planar half-edge vectors of the plate; corners are p +- e1 +- e2.
    e1x, e1y = h * f1[:, 0], h * f1[:, 1]
    e2x, e2y = h * f2[:, 0], h * f2[:, 1]
    ext_y = np.abs(e1y) + np.abs(e2y)
    belt = scene.belt
    over_wall = (y - ext_y < 0.0) | (y + ext_y > belt.width)
    ok &= ~(over_wall & (z < belt.wall_height + limits.clearance))
    idx = np.flatnonzero(ok)
    if idx.size:
        pkg = np.array([picks[k].package_id for k in idx], dtype=np.int32)
        blocked = kernels.plate_blocked(
            heightmap.top, np.ascontiguousarray(heightmap.owner, dtype=np.int32),
            float(heightmap.resolution),
            *(np.ascontiguousarray(a[idx]) for a in (x, y, z, e1x, e1y, e2x, e2y)),
            pkg, float(limits.clearance),
        )
        ok[idx] = blocked == 0
    return ok


def feasibility_filter(pick, scene, heightmap, limits, eoat=EoATModel()):
    """Stylized motion check for one pick.

    Rejects picks outside the reach disc, tilted beyond ``max_tilt``, whose
    plate would cross a side wall below wall height plus clearance, or whose
    plate footprint covers another package rising more than ``clearance``
    above the contact point.
    """
    return bool(feasible_mask([pick], scene, heightmap, limits, eoat)[0])


def generate_candidates(products, policy, k, seed, eoat, limits, radius=0.30):
    """Sample ``k`` picks per segment and apply the elementary filter.

    Equivalent to calling ``sample_picks`` per segment with seed
    ``derive_seed(seed, segment_id)``, but evaluates all cups in one batch.
    """
    _check_sampling_args(policy, k)
    hm = products.heightmap
    pts, axes, yaws, seg_ids, pkg_ids = [], [], [], [], []
    for seg_id, seg in products.segments.items():
        plane = products.planes[seg_id]
        if plane.degenerate:
            continue
        p, axis, yw = _sample_points(seg, plane, hm, policy, k, derive_seed(seed, seg_id),
                                     limits.max_tilt, radius)
        n = p.shape[0]
        pts.append(p)
        axes.extend([axis] * n)
        yaws.append(yw)
        seg_ids.extend([seg.id] * n)
        pkg_ids.extend([seg.package_id] * n)
    if not pts:
        return CandidateSet(products.scene.time_index, ())
    points = np.concatenate(pts)
    yaws = np.concatenate(yaws)
    cups = cup_positions(points, np.asarray(axes), yaws, eoat)
    cells, surface = surface_under(cups, hm)
    owner = hm.owner.ravel()
    pkg = np.asarray(pkg_ids)
    on_mask = (cells >= 0) & (owner[np.maximum(cells, 0)] == pkg[:, None])
    active = on_mask & (np.abs(cups[..., 2] - surface) <= eoat.seal_tolerance)
    picks = _make_picks(points, axes, yaws, active, seg_ids, pkg_ids, policy, 0)
    return elementary_filter(picks, products)
