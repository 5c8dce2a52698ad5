"""Tabular pick features: the fixed, versioned feature schema and extraction.

Units are meters and radians; nothing is normalized. Degenerate plane fits
report ``RESIDUAL_SENTINEL`` instead of an infinite residual so vectors
never contain NaN or infinity.
"""

import math
from dataclasses import dataclass

import numpy as np

from .eoat import cup_positions, surface_under
from .errors import SchemaMismatchError
from .scene import MATERIALS

SCHEMA_VERSION = "pickfeat-1"
RESIDUAL_SENTINEL = 1.0

_FIELDS = (
    ("package_height", "highest visible surface of the target segment", "m"),
    ("plane_rms_residual", "RMS vertical residual of the segment plane fit", "m"),
    ("n_active_cups", "suction cups sealing on the segment", "count"),
    ("alignment_angle", "angle between tool axis and fitted surface normal", "rad"),
    ("cup_plane_offset_mean", "mean |surface - fitted plane| under the active cups", "m"),
    ("cup_plane_offset_max", "max |surface - fitted plane| under the active cups", "m"),
    ("inactive_clearance_mean", "mean height of inactive cups above the surface beneath (0 if none)", "m"),
    ("inactive_clearance_min", "min height of inactive cups above the surface beneath (0 if none)", "m"),
    ("n_nearby_segments", "other segments with centroid within the nearby radius", "count"),
    ("adjacency_rank", "1 + neighbors with higher mean surface", "rank"),
    ("n_neighbors", "adjacency-graph degree", "count"),
    ("occlusion_level", "topological occlusion depth, 0 = unoccluded", "level"),
    ("visible_area", "visible segment area", "m^2"),
    ("classification_score", "segmentation confidence proxy", "score"),
    ("material_rigid_box", "one-hot material", "bool"),
    ("material_polybag", "one-hot material", "bool"),
    ("material_envelope", "one-hot material", "bool"),
    ("dist_pick_to_centroid", "planar distance from pick point to segment centroid", "m"),
    ("dist_to_nearest_wall", "planar distance from pick point to the closer belt wall", "m"),
    ("tool_tilt", "angle between tool axis and vertical", "rad"),
)

FEATURE_NAMES = tuple(name for name, _, _ in _FIELDS)
INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}


@dataclass(frozen=True)
class FeatureSchema:
    version: str
    names: tuple
    descriptions: tuple
    units: tuple

    @property
    def d(self):
        return len(self.names)

    def to_dict(self):
        return {
            "version": self.version,
            "fields": [
                {"name": n, "description": s, "unit": u}
                for n, s, u in zip(self.names, self.descriptions, self.units)
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        fields = doc["fields"]
        return cls(
            doc["version"],
            tuple(f["name"] for f in fields),
            tuple(f["description"] for f in fields),
            tuple(f["unit"] for f in fields),
        )


_SCHEMA = FeatureSchema(
    SCHEMA_VERSION,
    FEATURE_NAMES,
    tuple(s for _, s, _ in _FIELDS),
    tuple(u for _, _, u in _FIELDS),
)


def schema():
    return _SCHEMA


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if self.values.shape != (_SCHEMA.d,):
            raise SchemaMismatchError(f"expected {_SCHEMA.d} values, got {self.values.shape}")

    def __getitem__(self, name):
        return float(self.values[INDEX[name]])

    def as_dict(self):
        return dict(zip(FEATURE_NAMES, self.values.tolist()))


def check_schema(version):
    if version != SCHEMA_VERSION:
        raise SchemaMismatchError(f"feature schema {version!r} != {SCHEMA_VERSION!r}")


def feature_matrix(products, picks, eoat):
    """Feature rows for a batch of picks, shape (len(picks), d)."""
    n = len(picks)
    X = np.zeros((n, _SCHEMA.d))
    if n == 0:
        return X
    hm = products.heightmap
    belt = products.scene.belt
    graph = products.graph
    points = np.array([p.point for p in picks])
    axes = np.array([p.axis for p in picks])
    yaws = np.array([p.yaw for p in picks])
    cups = cup_positions(points, axes, yaws, eoat)
    _, surface = surface_under(cups, hm)
    active = np.zeros((n, 8), dtype=bool)
    for r, p in enumerate(picks):
        active[r, list(p.active_cups)] = True

    segs = [products.segments[p.segment_id] for p in picks]
    planes = [products.planes[p.segment_id] for p in picks]
    normals = np.array([pl.unit_normal for pl in planes])
    plane_c = np.array([pl.c for pl in planes])

    X[:, INDEX["package_height"]] = [s.max_height for s in segs]
    X[:, INDEX["plane_rms_residual"]] = [
        RESIDUAL_SENTINEL if pl.degenerate or not math.isfinite(pl.rms_residual) else pl.rms_residual
        for pl in planes
    ]
    X[:, INDEX["n_active_cups"]] = active.sum(axis=1)
    cosang = np.clip(np.einsum("ij,ij->i", axes, normals), -1.0, 1.0)
    X[:, INDEX["alignment_angle"]] = np.arccos(cosang)
    # Vertical deviation of the measured surface from the fitted plane at each active cup.
    plane_a = np.array([pl.a for pl in planes])
    plane_b = np.array([pl.b for pl in planes])
    plane_z = plane_a[:, None] * cups[..., 0] + plane_b[:, None] * cups[..., 1] + plane_c[:, None]
    dev = np.where(active, np.abs(surface - plane_z), 0.0)
    n_active = active.sum(axis=1)
    X[:, INDEX["cup_plane_offset_mean"]] = np.where(
        n_active > 0, dev.sum(axis=1) / np.maximum(n_active, 1), 0.0
    )
    X[:, INDEX["cup_plane_offset_max"]] = dev.max(axis=1)
    clearance = cups[..., 2] - surface
    inactive = ~active
    n_inactive = inactive.sum(axis=1)
    safe = np.where(inactive, clearance, 0.0)
    X[:, INDEX["inactive_clearance_mean"]] = np.where(
        n_inactive > 0, safe.sum(axis=1) / np.maximum(n_inactive, 1), 0.0
    )
    X[:, INDEX["inactive_clearance_min"]] = np.where(
        n_inactive > 0, np.where(inactive, clearance, np.inf).min(axis=1), 0.0
    )
    X[:, INDEX["n_nearby_segments"]] = [products.nearby[s.id] for s in segs]
    X[:, INDEX["adjacency_rank"]] = [graph.rank[s.id] for s in segs]
    degree = {node: 0 for node in graph.nodes}
    for a, b in graph.edges:
        degree[a] += 1
        degree[b] += 1
    X[:, INDEX["n_neighbors"]] = [degree[s.id] for s in segs]
    X[:, INDEX["occlusion_level"]] = [graph.occlusion_level[s.id] for s in segs]
    X[:, INDEX["visible_area"]] = [s.visible_area for s in segs]
    X[:, INDEX["classification_score"]] = [s.classification_score for s in segs]
    for m in MATERIALS:
        X[:, INDEX[f"material_{m.value}"]] = [float(s.material_label == m.value) for s in segs]
    cxy = np.array([s.centroid_xy for s in segs])
    X[:, INDEX["dist_pick_to_centroid"]] = np.hypot(points[:, 0] - cxy[:, 0], points[:, 1] - cxy[:, 1])
    X[:, INDEX["dist_to_nearest_wall"]] = np.minimum(points[:, 1], belt.width - points[:, 1])
    X[:, INDEX["tool_tilt"]] = np.arccos(np.clip(axes[:, 2], -1.0, 1.0))
    return X


def extract_features(products, pick, eoat):
    row = feature_matrix(products, [pick], eoat)[0]
    row.setflags(write=False)
    return FeatureVector(row)
