"""Synthetic conveyor scenes: packages dropped into a pile on a belt.

Belt frame: x runs along the belt (0..length), y across it (0..width); the
side walls sit at y = 0 and y = width. Packages are yawed rectangles
extruded vertically. A dropped package rests on the highest top surface
among the packages its footprint overlaps, so scenes never contain
floating packages and can be re-settled by replaying placement order.
"""

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, SceneInvariantError
from .seeding import rng_for

EPS = 1e-9


class Material(str, Enum):
    RIGID_BOX = "rigid_box"
    POLYBAG = "polybag"
    ENVELOPE = "envelope"


MATERIALS = (Material.RIGID_BOX, Material.POLYBAG, Material.ENVELOPE)


@dataclass(frozen=True)
class PackageSpec:
    id: int
    material: Material
    length: float
    width: float
    height: float
    deformability: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "material", Material(self.material))
        if min(self.length, self.width, self.height) <= 0:
            raise ConfigError(f"package {self.id}: dimensions must be positive")
        if self.material is Material.ENVELOPE and self.height > min(self.length, self.width):
            raise ConfigError(f"package {self.id}: envelope taller than its footprint")
        if not 0.0 <= self.deformability <= 1.0:
            raise ConfigError(f"package {self.id}: deformability outside [0, 1]")
        if (self.deformability == 0.0) != (self.material is Material.RIGID_BOX):
            raise ConfigError(f"package {self.id}: deformability must be 0 exactly for rigid boxes")

    @property
    def diagonal(self):
        return math.hypot(self.length, self.width)


@dataclass(frozen=True)
class PackagePose:
    center_xy: tuple
    yaw: float
    rest_z: float = 0.0


@dataclass(frozen=True)
class Belt:
    length: float = 1.6
    width: float = 1.0
    wall_height: float = 0.15


@dataclass(frozen=True)
class Placed:
    spec: PackageSpec
    pose: PackagePose
    corners: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "corners", footprint_corners(self.spec, self.pose.center_xy, self.pose.yaw)
        )

    @property
    def id(self):
        return self.spec.id

    @property
    def top(self):
        return self.pose.rest_z + self.spec.height


@dataclass(frozen=True)
class SceneState:
    time_index: int
    belt: Belt
    packages: tuple
    rng_seed: int

    def ids(self):
        return [p.id for p in self.packages]

    def get(self, package_id):
        for p in self.packages:
            if p.id == package_id:
                return p
        raise KeyError(f"unknown package id {package_id}")

    def __len__(self):
        return len(self.packages)


@dataclass(frozen=True)
class FixedPlacement:
    spec: PackageSpec
    center_xy: tuple
    yaw: float = 0.0


@dataclass(frozen=True)
class SceneConfig:
    """Scene generator settings. Defaults are invented desk-scale values."""

    min_packages: int = 8
    max_packages: int = 15
    belt_length: float = 1.6
    belt_width: float = 1.0
    wall_height: float = 0.15
    pile_spread: float = 0.9
    p_rigid_box: float = 0.5
    p_polybag: float = 0.35
    p_envelope: float = 0.15
    rigid_box_length: tuple = (0.15, 0.45)
    rigid_box_width: tuple = (0.12, 0.35)
    rigid_box_height: tuple = (0.05, 0.25)
    polybag_length: tuple = (0.15, 0.40)
    polybag_width: tuple = (0.12, 0.30)
    polybag_height: tuple = (0.03, 0.12)
    envelope_length: tuple = (0.20, 0.35)
    envelope_width: tuple = (0.15, 0.25)
    envelope_height: tuple = (0.005, 0.03)
    polybag_deformability: tuple = (0.4, 1.0)
    envelope_deformability: tuple = (0.1, 0.4)
    fixed_packages: tuple = ()

    @property
    def belt(self):
        return Belt(self.belt_length, self.belt_width, self.wall_height)

    def material_probs(self):
        return np.array([self.p_rigid_box, self.p_polybag, self.p_envelope], dtype=float)

    def validate(self):
        if self.belt_length <= 0 or self.belt_width <= 0 or self.wall_height < 0:
            raise ConfigError("belt dimensions must be positive")
        if self.fixed_packages:
            return
        probs = self.material_probs()
        if np.any(probs < 0) or probs.sum() <= 0:
            raise ConfigError("at least one package material needs a positive probability")
        if not 1 <= self.min_packages <= self.max_packages:
            raise ConfigError("need 1 <= min_packages <= max_packages")
        for m in MATERIALS:
            for dim in ("length", "width", "height"):
                lo, hi = getattr(self, f"{m.value}_{dim}")
                if not 0 < lo <= hi:
                    raise ConfigError(f"bad {m.value}_{dim} range ({lo}, {hi})")


# -- geometry -----------------------------------------------------------------

def footprint_corners(spec, center_xy, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = spec.length / 2.0, spec.width / 2.0
    cx, cy = center_xy
    return tuple(
        (cx + c * u - s * v, cy + s * u + c * v)
        for u, v in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    )


def half_extents(spec, yaw):
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    return (spec.length * c + spec.width * s) / 2.0, (spec.length * s + spec.width * c) / 2.0


def _project(corners, ax, ay):
    vals = [x * ax + y * ay for x, y in corners]
    return min(vals), max(vals)


def rects_overlap(a, b):
    """Separating-axis test for two convex quads; touching edges do not overlap."""
    for quad in (a, b):
        for k in range(2):
            x0, y0 = quad[k]
            x1, y1 = quad[k + 1]
            ax, ay = y0 - y1, x1 - x0
            amin, amax = _project(a, ax, ay)
            bmin, bmax = _project(b, ax, ay)
            scale = EPS * (abs(ax) + abs(ay))
            if amax <= bmin + scale or bmax <= amin + scale:
                return False
    return True


def within_belt(corners, belt):
    return all(
        -EPS <= x <= belt.length + EPS and -EPS <= y <= belt.width + EPS for x, y in corners
    )


def stacking_height(placed, corners):
    """Highest top surface among ``placed`` whose footprint overlaps ``corners``."""
    z = 0.0
    for p in placed:
        if p.top > z and rects_overlap(p.corners, corners):
            z = p.top
    return z


# -- operations ---------------------------------------------------------------

def empty_scene(belt=None, rng_seed=0, time_index=0):
    return SceneState(time_index, belt or Belt(), (), int(rng_seed))


def drop_package(scene, spec, center_xy, yaw):
    center_xy = (float(center_xy[0]), float(center_xy[1]))
    if any(p.id == spec.id for p in scene.packages):
        raise SceneInvariantError(f"duplicate package id {spec.id}")
    corners = footprint_corners(spec, center_xy, yaw)
    if not within_belt(corners, scene.belt):
        raise SceneInvariantError(f"package {spec.id} footprint leaves the belt")
    rest_z = stacking_height(scene.packages, corners)
    new = Placed(spec, PackagePose(center_xy, float(yaw), rest_z))
    return replace(scene, packages=scene.packages + (new,))


def _settle(packages):
    settled = []
    for p in packages:
        rest_z = stacking_height(settled, p.corners)
        if rest_z != p.pose.rest_z:
            p = Placed(p.spec, replace(p.pose, rest_z=rest_z))
        settled.append(p)
    return tuple(settled)


def remove_package(scene, package_id):
    scene.get(package_id)
    rest = [p for p in scene.packages if p.id != package_id]
    return replace(scene, packages=_settle(rest), time_index=scene.time_index + 1)


def perturb_package(scene, package_id, seed, scale=0.5):
    """Re-drop a package at a randomly displaced position (holding failure).

    The displacement is at most ``scale`` package diagonals, clamped so the
    footprint stays on the belt.
    """
    p = scene.get(package_id)
    rng = np.random.default_rng(seed)
    radius = scale * rng.random() * p.spec.diagonal
    theta = rng.uniform(0.0, 2.0 * math.pi)
    hx, hy = half_extents(p.spec, p.pose.yaw)
    cx = p.pose.center_xy[0] + radius * math.cos(theta)
    cy = p.pose.center_xy[1] + radius * math.sin(theta)
    cx = min(max(cx, hx), scene.belt.length - hx)
    cy = min(max(cy, hy), scene.belt.width - hy)
    scene = remove_package(scene, package_id)
    return drop_package(scene, p.spec, (cx, cy), p.pose.yaw)


def _sample_spec(rng, config, package_id):
    probs = config.material_probs()
    material = MATERIALS[int(rng.choice(3, p=probs / probs.sum()))]
    m = material.value
    length = rng.uniform(*getattr(config, f"{m}_length"))
    width = rng.uniform(*getattr(config, f"{m}_width"))
    height = rng.uniform(*getattr(config, f"{m}_height"))
    if material is Material.ENVELOPE:
        height = min(height, length, width)
    deform = 0.0
    if material is not Material.RIGID_BOX:
        deform = rng.uniform(*getattr(config, f"{m}_deformability"))
    return PackageSpec(package_id, material, length, width, height, deform)


def generate_scene(config, seed):
    config.validate()
    belt = config.belt
    scene = empty_scene(belt, rng_seed=seed)
    if config.fixed_packages:
        for fp in config.fixed_packages:
            scene = drop_package(scene, fp.spec, fp.center_xy, fp.yaw)
        return scene

    rng = rng_for(seed, "scene")
    n = int(rng.integers(config.min_packages, config.max_packages + 1))
    for pid in range(n):
        for _ in range(100):
            spec = _sample_spec(rng, config, pid)
            yaw = rng.uniform(0.0, math.pi)
            hx, hy = half_extents(spec, yaw)
            ax, ay = belt.length / 2.0 - hx, belt.width / 2.0 - hy
            if ax >= 0 and ay >= 0:
                break
        else:
            raise ConfigError("package dimensions do not fit on the belt")
        u, v = rng.uniform(-1.0, 1.0, size=2)
        cx = belt.length / 2.0 + config.pile_spread * ax * u
        cy = belt.width / 2.0 + config.pile_spread * ay * v
        scene = drop_package(scene, spec, (cx, cy), yaw)
    return scene


def validate_scene(scene):
    ids = scene.ids()
    if len(set(ids)) != len(ids):
        raise SceneInvariantError("package ids are not unique")
    for p in scene.packages:
        if p.pose.rest_z < 0:
            raise SceneInvariantError(f"package {p.id} below the belt")
        if not within_belt(p.corners, scene.belt):
            raise SceneInvariantError(f"package {p.id} footprint leaves the belt")
    for p, q in zip(scene.packages, _settle(scene.packages)):
        if p.pose.rest_z != q.pose.rest_z:
            raise SceneInvariantError(
                f"package {p.id} rests at {p.pose.rest_z}, stacking rule gives {q.pose.rest_z}"
            )


# -- serialization ------------------------------------------------------------

SCENE_FORMAT = "pickrank.scene/1"


def scene_to_dict(scene):
    return {
        "format": SCENE_FORMAT,
        "time_index": scene.time_index,
        "rng_seed": scene.rng_seed,
        "belt": {
            "length": scene.belt.length,
            "width": scene.belt.width,
            "wall_height": scene.belt.wall_height,
        },
        "packages": [
            {
                "id": p.spec.id,
                "material": p.spec.material.value,
                "length": p.spec.length,
                "width": p.spec.width,
                "height": p.spec.height,
                "deformability": p.spec.deformability,
                "center_xy": list(p.pose.center_xy),
                "yaw": p.pose.yaw,
                "rest_z": p.pose.rest_z,
            }
            for p in scene.packages
        ],
    }


def scene_from_dict(doc):
    if doc.get("format") != SCENE_FORMAT:
        raise SceneInvariantError(f"not a scene document: {doc.get('format')!r}")
    packages = tuple(
        Placed(
            PackageSpec(
                d["id"], d["material"], d["length"], d["width"], d["height"], d["deformability"]
            ),
            PackagePose(tuple(d["center_xy"]), d["yaw"], d["rest_z"]),
        )
        for d in doc["packages"]
    )
    scene = SceneState(doc["time_index"], Belt(**doc["belt"]), packages, doc["rng_seed"])
    validate_scene(scene)
    return scene


def save_scene(scene, path):
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path):
    with open(path) as fh:
        return scene_from_dict(json.load(fh))
