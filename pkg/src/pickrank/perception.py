"""Top-down perception: heightmap, segments, plane fits and scene graphs.

Segmentation is ground truth: each visible package yields one segment
whose mask is exactly the set of cells it owns in the heightmap. Segment
ids equal package ids so they stay stable while a scene is cleared.

Grid convention: cell (i, j) covers x in [i*res, (i+1)*res) and y in
[j*res, (j+1)*res); its center is ((i+0.5)*res, (j+0.5)*res).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError
from .graphs import condensation_levels
from .scene import EPS, rects_overlap
from .seeding import derive_seed

RMS_SENTINEL = math.inf


@dataclass(frozen=True)
class PerceptionConfig:
    resolution: float = 0.01
    surface_noise: float = 0.008  # noise std (m) at deformability 1
    hidden_penalty: float = 0.8  # k in score = 1 - k * hidden_fraction
    min_score: float = 0.3
    neighbor_radius: int = 3  # cells
    nearby_radius: float = 0.3  # meters


@dataclass(frozen=True, eq=False)
class HeightMap:
    resolution: float
    top: np.ndarray  # (nx, ny) float64 meters
    owner: np.ndarray  # (nx, ny) int32, -1 for bare belt
    footprint_sizes: dict = None  # package id -> footprint cell count, when rendered

    @property
    def shape(self):
        return self.top.shape

    def centers(self, flat_idx):
        i, j = np.divmod(np.asarray(flat_idx), self.top.shape[1])
        return (i + 0.5) * self.resolution, (j + 0.5) * self.resolution

    def cell_of(self, x, y):
        """Flat index of the cell containing (x, y), or -1 off the grid."""
        nx, ny = self.top.shape
        i = np.floor(np.asarray(x) / self.resolution).astype(np.int64)
        j = np.floor(np.asarray(y) / self.resolution).astype(np.int64)
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        return np.where(inside, i * ny + j, -1)


@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    package_id: int
    cells: np.ndarray  # sorted flat cell indices
    visible_area: float
    centroid_xy: tuple
    max_height: float
    mean_height: float
    material_label: str
    classification_score: float

    @property
    def n_cells(self):
        return int(self.cells.size)


@dataclass(frozen=True)
class FittedPlane:
    """Least-squares plane z = a*x + b*y + c."""

    a: float
    b: float
    c: float
    unit_normal: tuple
    rms_residual: float
    degenerate: bool = False

    @property
    def offset(self):
        return self.c

    def z_at(self, x, y):
        return self.a * x + self.b * y + self.c

    @property
    def tilt(self):
        return math.acos(min(1.0, self.unit_normal[2]))


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    nodes: tuple
    edges: frozenset  # (a, b) with a < b
    rank: dict
    occlusion_level: dict
    mean_height: dict

    def neighbors(self, node):
        return sorted({b if a == node else a for a, b in self.edges if node in (a, b)})

    def degree(self, node):
        return sum(1 for e in self.edges if node in e)


def _frozen(a):
    a.setflags(write=False)
    return a


def footprint_cells(placed, resolution, shape):
    """Flat indices (sorted) of cells whose centers lie inside the footprint."""
    nx, ny = shape
    xs = [x for x, _ in placed.corners]
    ys = [y for _, y in placed.corners]
    i0 = max(0, int(math.floor(min(xs) / resolution - 0.5)))
    i1 = min(nx - 1, int(math.ceil(max(xs) / resolution - 0.5)))
    j0 = max(0, int(math.floor(min(ys) / resolution - 0.5)))
    j1 = min(ny - 1, int(math.ceil(max(ys) / resolution - 0.5)))
    if i1 < i0 or j1 < j0:
        return np.empty(0, dtype=np.int64)
    ii = (np.arange(i0, i1 + 1) + 0.5) * resolution
    jj = (np.arange(j0, j1 + 1) + 0.5) * resolution
    cx, cy = placed.pose.center_xy
    c, s = math.cos(placed.pose.yaw), math.sin(placed.pose.yaw)
    dx = ii[:, None] - cx
    dy = jj[None, :] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= placed.spec.length / 2 + EPS) & (np.abs(v) <= placed.spec.width / 2 + EPS)
    li, lj = np.nonzero(inside)
    return (li + i0).astype(np.int64) * ny + (lj + j0)


def grid_shape(belt, resolution):
    return (
        int(math.ceil(belt.length / resolution - 1e-9)),
        int(math.ceil(belt.width / resolution - 1e-9)),
    )


def render_heightmap(scene, resolution=0.01, surface_noise=0.008):
    """Topmost surface per cell; deformable tops get seeded per-cell noise."""
    if resolution <= 0:
        raise ConfigError("resolution must be positive")
    for p in scene.packages:
        if resolution > min(p.spec.length, p.spec.width):
            raise ConfigError(
                f"resolution {resolution} m is coarser than package {p.id}'s footprint"
            )
    shape = grid_shape(scene.belt, resolution)
    top = np.zeros(shape[0] * shape[1])
    owner = np.full(shape[0] * shape[1], -1, dtype=np.int32)
    # Paint low to high; overlapping packages always differ in true top.
    order = sorted(range(len(scene.packages)), key=lambda k: (scene.packages[k].top, k))
    sizes = {}
    for k in order:
        p = scene.packages[k]
        cells = footprint_cells(p, resolution, shape)
        sizes[p.id] = int(cells.size)
        if cells.size == 0:
            continue
        h = np.full(cells.size, p.top)
        if p.spec.deformability > 0 and surface_noise > 0:
            rng = np.random.default_rng(derive_seed(scene.rng_seed, "surface", p.id))
            noise = rng.normal(0.0, surface_noise * p.spec.deformability, cells.size)
            h = np.maximum(h + noise, p.pose.rest_z + 1e-4)
        top[cells] = h
        owner[cells] = p.id
    return HeightMap(
        resolution, _frozen(top.reshape(shape)), _frozen(owner.reshape(shape)), sizes
    )


def extract_segments(heightmap, scene, hidden_penalty=0.8, min_score=0.3):
    owner = heightmap.owner.ravel()
    top = heightmap.top.ravel()
    order = np.argsort(owner, kind="stable")
    sorted_owner = owner[order]
    ids, starts, counts = np.unique(sorted_owner, return_index=True, return_counts=True)
    res = heightmap.resolution
    segments = []
    for pid, start, count in zip(ids, starts, counts):
        if pid < 0:
            continue
        cells = order[start:start + count]  # stable sort keeps cells ascending
        p = scene.get(int(pid))
        if heightmap.footprint_sizes is not None and p.id in heightmap.footprint_sizes:
            n_fp = heightmap.footprint_sizes[p.id]
        else:
            n_fp = footprint_cells(p, res, heightmap.shape).size
        hidden = 1.0 - count / max(n_fp, count)
        score = min(1.0, max(min_score, 1.0 - hidden_penalty * hidden))
        x, y = heightmap.centers(cells)
        z = top[cells]
        segments.append(
            Segment(
                id=int(pid),
                package_id=int(pid),
                cells=_frozen(cells.astype(np.int64)),
                visible_area=float(count) * res * res,
                centroid_xy=(float(x.mean()), float(y.mean())),
                max_height=float(z.max()),
                mean_height=float(z.mean()),
                material_label=p.spec.material.value,
                classification_score=float(score),
            )
        )
    return segments


def fit_plane_points(x, y, z):
    """Least-squares plane through points; degenerate inputs get a flagged plane."""
    n = x.size
    if n >= 3:
        xm, ym, zm = x.mean(), y.mean(), z.mean()
        dx, dy, dz = x - xm, y - ym, z - zm
        sxx, syy, sxy = dx @ dx, dy @ dy, dx @ dy
        sxz, syz = dx @ dz, dy @ dz
        det = sxx * syy - sxy * sxy
        if det > 1e-12 * max(sxx * syy, 1e-300):
            a = (sxz * syy - syz * sxy) / det
            b = (syz * sxx - sxz * sxy) / det
            c = zm - a * xm - b * ym
            r = z - (a * x + b * y + c)
            norm = math.sqrt(a * a + b * b + 1.0)
            return FittedPlane(
                float(a), float(b), float(c),
                (-a / norm, -b / norm, 1.0 / norm),
                float(math.sqrt(r @ r / n)),
            )
    c = float(z.mean()) if n else 0.0
    return FittedPlane(0.0, 0.0, c, (0.0, 0.0, 1.0), RMS_SENTINEL, degenerate=True)


def fit_plane(segment, heightmap):
    x, y = heightmap.centers(segment.cells)
    z = heightmap.top.ravel()[segment.cells]
    return fit_plane_points(x, y, z)


def occlusion_edges(segments, scene):
    """A -> B when A's footprint overlaps B's and A's top is higher."""
    ids = [s.package_id for s in segments]
    pk = [scene.get(i) for i in ids]
    box = [_bbox(p.corners) for p in pk]
    succ = {i: [] for i in ids}
    for ai in range(len(ids)):
        a = pk[ai]
        ax0, ax1, ay0, ay1 = box[ai]
        for bi in range(ai + 1, len(ids)):
            b = pk[bi]
            bx0, bx1, by0, by1 = box[bi]
            # Disjoint bounding boxes rule out an overlap before the exact test.
            if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
                continue
            if abs(a.top - b.top) <= EPS or not rects_overlap(a.corners, b.corners):
                continue
            if a.top > b.top:
                succ[a.id].append(b.id)
            else:
                succ[b.id].append(a.id)
    return succ


def _bbox(corners):
    xs = [c[0] for c in corners]
    ys = [c[1] for c in corners]
    return min(xs), max(xs), min(ys), max(ys)


def occlusion_order(segments, heightmap, scene):
    """Occlusion level per segment id: 0 = unoccluded, then 1, 2, ..."""
    succ = occlusion_edges(segments, scene)
    return condensation_levels([s.id for s in segments], succ)


def neighbor_pairs(owner, radius):
    """Unordered owner pairs with cells within ``radius`` (Chebyshev) of each other."""
    if owner.size == 0 or owner.max() < 0:
        return frozenset()
    n_ids = int(owner.max()) + 1
    adj = kernels.neighbor_pairs(np.ascontiguousarray(owner, dtype=np.int32), int(radius), n_ids)
    a, b = np.nonzero(np.triu(adj, 1))
    return frozenset(zip(a.tolist(), b.tolist()))


def build_adjacency_graph(segments, heightmap, neighbor_radius=3, occlusion_level=None):
    nodes = tuple(s.id for s in segments)
    edges = neighbor_pairs(heightmap.owner, neighbor_radius) if nodes else frozenset()
    mean_h = {s.id: s.mean_height for s in segments}
    higher = {n: 0 for n in nodes}
    for a, b in edges:
        if mean_h[a] > mean_h[b]:
            higher[b] += 1
        elif mean_h[b] > mean_h[a]:
            higher[a] += 1
    rank = {n: 1 + higher[n] for n in nodes}
    levels = dict(occlusion_level) if occlusion_level is not None else {n: 0 for n in nodes}
    return AdjacencyGraph(nodes, edges, rank, levels, mean_h)


def nearby_count(segment, segments, radius=0.3):
    cx, cy = segment.centroid_xy
    return sum(
        1
        for s in segments
        if s.id != segment.id
        and math.hypot(s.centroid_xy[0] - cx, s.centroid_xy[1] - cy) <= radius
    )


@dataclass(frozen=True, eq=False)
class SceneProducts:
    """Everything perception knows about one scene state."""

    scene: object
    heightmap: HeightMap
    segments: dict  # id -> Segment, ascending id order
    planes: dict  # id -> FittedPlane
    graph: AdjacencyGraph
    nearby: dict  # id -> int


def perceive(scene, config=PerceptionConfig()):
    hm = render_heightmap(scene, config.resolution, config.surface_noise)
    segs = extract_segments(hm, scene, config.hidden_penalty, config.min_score)
    levels = occlusion_order(segs, hm, scene)
    graph = build_adjacency_graph(segs, hm, config.neighbor_radius, levels)
    return SceneProducts(
        scene=scene,
        heightmap=hm,
        segments={s.id: s for s in segs},
        planes={s.id: fit_plane(s, hm) for s in segs},
        graph=graph,
        nearby={s.id: nearby_count(s, segs, config.nearby_radius) for s in segs},
    )


# -- export -------------------------------------------------------------------

def heightmap_to_pgm(heightmap):
    """16-bit binary PGM, millimeters, row = y index, column = x index."""
    mm = np.clip(np.rint(heightmap.top * 1000.0), 0, 65535).astype(">u2")
    img = mm.T[::-1]  # y up
    h, w = img.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + img.tobytes()


def graph_to_dot(graph):
    lines = ["graph adjacency {"]
    for n in graph.nodes:
        lines.append(
            f'  s{n} [label="{n}\\nrank {graph.rank[n]}\\nlevel {graph.occlusion_level[n]}"];'
        )
    for a, b in sorted(graph.edges):
        lines.append(f"  s{a} -- s{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
