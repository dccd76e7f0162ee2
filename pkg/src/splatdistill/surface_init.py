"""Splat position initialization.

Pipeline: evaluate the implicit density on a uniform lattice, extract the
isosurface with marching cubes, scatter points on the surface and pull
them slightly toward the centroid to thicken it. Random and grid
initializations exist as alternatives for ablations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import diffmath as dm
from ._mc_tables import TRI_TABLE
from .exceptions import InitializationError
from .teacher import NerfHead, nerf_head_field
from .triplane import TriPlane

# Cell corner offsets in table order: z-level-major, circular (x, y).
_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
     (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    dtype=np.int64,
)
# Local edge -> (lower corner offset, axis); endpoints run +1 along axis.
_EDGES = np.array(
    [(0, 0, 0, 0), (1, 0, 0, 1), (0, 1, 0, 0), (0, 0, 0, 1),
     (0, 0, 1, 0), (1, 0, 1, 1), (0, 1, 1, 0), (0, 0, 1, 1),
     (0, 0, 0, 2), (1, 0, 0, 2), (1, 1, 0, 2), (0, 1, 0, 2)],
    dtype=np.int64,
)

_TRI_TABLE = np.asarray(TRI_TABLE, dtype=np.int64)


@dataclass
class DensityGrid:
    """Densities on the G^3 uniform lattice spanning [-1,1]^3.

    Endpoint-inclusive (align-corners) spacing, matching the tri-plane
    texel convention; coarser grids share their corner points with finer
    ones.
    """

    resolution: int
    values: np.ndarray  # [G,G,G], axes x, y, z

    def __post_init__(self):
        g = self.resolution
        if self.values.shape != (g, g, g):
            raise ValueError(f"grid shape {self.values.shape} != ({g},{g},{g})")
        if not np.isfinite(self.values).all() or self.values.min() < 0:
            raise ValueError("density grid must be finite and non-negative")

    def axis_coords(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.resolution, dtype=np.float32)


@dataclass
class SurfaceMesh:
    vertices: np.ndarray  # [V,3] float32
    triangles: np.ndarray  # [T,3] int64

    @property
    def empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class InitStrategyKind(str, Enum):
    RANDOM = "random"
    GRID = "grid"
    MARCHING_CUBES = "marching_cubes"


@dataclass
class InitStrategy:
    kind: InitStrategyKind = InitStrategyKind.MARCHING_CUBES
    count: int = 20_000
    shrink_max: float = 0.15  # depth of the inward interpolation
    grid_resolution: int = 128
    iso: float | None = None  # None = automatic level

    def __post_init__(self):
        self.kind = InitStrategyKind(self.kind)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (0.0 <= self.shrink_max < 1.0):
            raise ValueError("shrink_max must be in [0, 1)")


def eval_density_grid(tp: TriPlane, head: NerfHead, resolution: int = 128,
                      chunk: int = 131072) -> DensityGrid:
    """Decode densities at every lattice cell center."""
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    ax = np.linspace(-1.0, 1.0, resolution, dtype=np.float32)
    xs, ys, zs = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0], dtype=np.float32)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        sigma, _ = nerf_head_field(tp, head, pts[lo:hi])
        out[lo:hi] = sigma.data.reshape(-1)
    return DensityGrid(resolution, out.reshape(resolution, resolution, resolution))


def default_iso_level(grid: DensityGrid) -> float:
    """Density at which one grid cell reaches opacity one half.

    Soft fields may never reach that level, so the threshold is capped at
    half the grid maximum to keep a surface extractable.
    """
    cell = 2.0 / grid.resolution
    iso = math.log(2.0) / cell
    cap = 0.5 * float(grid.values.max())
    return min(iso, cap) if cap > 0 else iso


def marching_cubes(grid: DensityGrid, iso: float) -> SurfaceMesh:
    """Standard 256-case table polygonization with edge interpolation.

    Vertices are welded on shared cell edges and emitted in cell index
    order, so the output is deterministic. Returns an empty mesh when no
    cell crosses the iso level.
    """
    if not math.isfinite(iso):
        raise ValueError("iso must be finite")
    g = grid.resolution
    vals = grid.values.astype(np.float32) - np.float32(iso)
    inside = vals < 0.0

    nc = g - 1
    index = np.zeros((nc, nc, nc), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        index |= inside[dx : dx + nc, dy : dy + nc, dz : dz + nc].astype(np.uint16) << bit
    ix, iy, iz = np.nonzero((index != 0) & (index != 255))
    if ix.size == 0:
        return SurfaceMesh(
            vertices=np.zeros((0, 3), dtype=np.float32),
            triangles=np.zeros((0, 3), dtype=np.int64),
        )

    coords = grid.axis_coords().astype(np.float64)
    cell = 2.0 / (g - 1)
    vert_ids: dict[int, int] = {}
    verts: list = []
    tris: list = []

    def edge_vertex(cx, cy, cz, e):
        ox, oy, oz, axis = _EDGES[e]
        ax_, ay, az = cx + ox, cy + oy, cz + oz
        bx, by, bz = ax_, ay, az
        if axis == 0:
            bx += 1
        elif axis == 1:
            by += 1
        else:
            bz += 1
        key = (((ax_ * g + ay) * g + az) << 2) | int(axis)
        vid = vert_ids.get(key)
        if vid is not None:
            return vid
        va = float(vals[ax_, ay, az])
        vb = float(vals[bx, by, bz])
        t = va / (va - vb)
        px = coords[ax_] + (cell * t if axis == 0 else 0.0)
        py = coords[ay] + (cell * t if axis == 1 else 0.0)
        pz = coords[az] + (cell * t if axis == 2 else 0.0)
        vid = len(verts)
        verts.append((px, py, pz))
        vert_ids[key] = vid
        return vid

    for cx, cy, cz in zip(ix.tolist(), iy.tolist(), iz.tolist()):
        row = _TRI_TABLE[index[cx, cy, cz]]
        for t0 in range(0, 16, 3):
            e0 = row[t0]
            if e0 < 0:
                break
            v0 = edge_vertex(cx, cy, cz, e0)
            v1 = edge_vertex(cx, cy, cz, row[t0 + 1])
            v2 = edge_vertex(cx, cy, cz, row[t0 + 2])
            tris.append((v0, v1, v2))

    return SurfaceMesh(
        vertices=np.asarray(verts, dtype=np.float32),
        triangles=np.asarray(tris, dtype=np.int64),
    )


def sample_surface_points(mesh: SurfaceMesh, count: int, shrink_max: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Area-weighted surface samples pulled toward the centroid.

    Triangles are picked with probability proportional to area, the point
    is uniform in the triangle, then moved by a factor drawn uniformly
    from [0, shrink_max] toward the mesh centroid.
    """
    if mesh.empty:
        raise InitializationError("cannot sample points from an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0.0:
        raise InitializationError("surface mesh has zero total area")
    probs = areas / total
    pick = rng.choice(areas.shape[0], size=count, p=probs)
    a = mesh.vertices[mesh.triangles[pick, 0]].astype(np.float64)
    b = mesh.vertices[mesh.triangles[pick, 1]].astype(np.float64)
    c = mesh.vertices[mesh.triangles[pick, 2]].astype(np.float64)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    pts = (
        a * (1.0 - r1)[:, None]
        + b * (r1 * (1.0 - r2))[:, None]
        + c * (r1 * r2)[:, None]
    )
    lam = rng.uniform(0.0, shrink_max, size=count)[:, None] if shrink_max > 0 else 0.0
    if shrink_max > 0:
        pts = pts + lam * (mesh.centroid().astype(np.float64)[None, :] - pts)
    return np.clip(pts, -1.0, 1.0).astype(np.float32)


def grid_positions(count: int) -> np.ndarray:
    """First ``count`` cell centers of the smallest covering cubic lattice."""
    m = math.ceil(count ** (1.0 / 3.0))
    while m**3 < count:  # guard fp rounding of the cube root
        m += 1
    ax = (-1.0 + (np.arange(m) + 0.5) * (2.0 / m)).astype(np.float32)
    xs, ys, zs = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    return pts[:count]


def random_positions(count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(count, 3)).astype(np.float32)


def sample_positions(strategy: InitStrategy, tp: TriPlane, head: NerfHead,
                     rng: np.random.Generator) -> np.ndarray:
    """Initial splat positions in [-1,1]^3 for the chosen strategy.

    The marching-cubes route falls back to random placement when the
    field has no extractable surface.
    """
    if strategy.kind is InitStrategyKind.RANDOM:
        return random_positions(strategy.count, rng)
    if strategy.kind is InitStrategyKind.GRID:
        return grid_positions(strategy.count)
    grid = eval_density_grid(tp, head, strategy.grid_resolution)
    iso = strategy.iso if strategy.iso is not None else default_iso_level(grid)
    mesh = marching_cubes(grid, iso)
    if mesh.empty:
        warnings.warn(
            "isosurface empty; falling back to random position initialization",
            RuntimeWarning,
        )
        return random_positions(strategy.count, rng)
    return sample_surface_points(mesh, strategy.count, strategy.shrink_max, rng)


def write_obj(mesh: SurfaceMesh, path) -> None:
    """ASCII OBJ dump ('v'/'f' records) for quick inspection."""
    path = Path(path)
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
