"""Surface point extraction: marching cubes -> farthest point sampling.

Coordinate convention used everywhere: point rows are (z, y, x), normalized
to [0, 1] by dividing the voxel coordinate by (D, H, W).  FPS distances are
computed in voxel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import GeometryError
from .synthvol import MaskVolume, atomic_write_text


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in voxel coordinates."""

    vertices: np.ndarray  # (V, 3) float64, (z, y, x)
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle indices out of vertex range")

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for a, b, c in self.triangles:
            for u, v in ((a, b), (b, c), (c, a)):
                key = (int(min(u, v)), int(max(u, v)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return all(n == 2 for n in self.edge_counts().values())

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.triangles)

    def area(self) -> float:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        cross = np.cross(b - a, c - a)
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())


@dataclass
class PointSet:
    """(N, 3) matrix of (z, y, x) coordinates normalized to [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"point set must be (N, 3), got {self.points.shape}")

    def validate(self, n_points: int | None = None) -> None:
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point set contains non-finite coordinates")
        if self.points.min(initial=0.0) < 0.0 or self.points.max(initial=0.0) > 1.0:
            raise GeometryError("point coordinates outside [0, 1]")
        if n_points is not None and len(self.points) != n_points:
            raise GeometryError(f"expected {n_points} points, got {len(self.points)}")

    def __len__(self) -> int:
        return len(self.points)


def marching_cubes(mask: MaskVolume, iso: float = 0.5) -> TriangleMesh:
    """Extract the iso-surface of a binary mask sampled at voxel centers.

    The foreground must be strictly interior (pad first) so the extracted
    surface of a single component is closed.
    """
    data = mask.data
    n_fg = int(data.sum())
    if n_fg == 0:
        raise GeometryError("mask is empty; no surface to extract")
    if n_fg == data.size:
        raise GeometryError("mask is full; no surface to extract")
    boundary_touch = (
        data[0].any() or data[-1].any()
        or data[:, 0].any() or data[:, -1].any()
        or data[:, :, 0].any() or data[:, :, -1].any()
    )
    if boundary_touch:
        raise GeometryError(
            "foreground touches the volume boundary; pad the volume before extraction"
        )
    verts, faces, _, _ = measure.marching_cubes(data.astype(np.float64), level=iso)
    return TriangleMesh(vertices=verts, triangles=faces)


def farthest_point_indices(candidates: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Greedy maximin subset of candidate rows; returns selected indices.

    First index drawn uniformly by seed; each later pick maximizes the
    minimum squared distance to the already-selected set, ties broken by
    the lowest candidate index.  If k exceeds the pool size the greedy
    permutation is extended with uniform draws (with replacement).
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise GeometryError("FPS needs a non-empty (M, 3) candidate array")
    if k < 1:
        raise GeometryError(f"FPS needs k >= 1, got {k}")
    n = len(candidates)
    rng = np.random.default_rng(seed)

    first = int(rng.integers(n))
    chosen = [first]
    min_sq = ((candidates - candidates[first]) ** 2).sum(axis=1)
    for _ in range(min(k, n) - 1):
        nxt = int(np.argmax(min_sq))  # argmax takes the lowest index on ties
        chosen.append(nxt)
        min_sq = np.minimum(min_sq, ((candidates - candidates[nxt]) ** 2).sum(axis=1))
    if k > n:
        chosen.extend(int(i) for i in rng.integers(n, size=k - n))
    return np.asarray(chosen, dtype=np.int64)


def farthest_point_sampling(candidates: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Greedy maximin sample of k points from the candidate pool."""
    idx = farthest_point_indices(candidates, k, seed)
    return np.asarray(candidates, dtype=np.float64)[idx]


def gt_points(mask: MaskVolume, n_points: int = 2048, seed: int = 0) -> PointSet:
    """Ground-truth surface points: marching cubes vertices -> FPS -> normalize."""
    mesh = marching_cubes(mask)
    sampled = farthest_point_sampling(mesh.vertices, n_points, seed)
    dims = np.asarray(mask.dims, dtype=np.float64)
    ps = PointSet(sampled / dims)
    ps.validate(n_points)
    return ps


def perturb_points(ps: PointSet, noise_range: float = 0.005, seed: int = 0) -> PointSet:
    """Add per-coordinate uniform noise in [-range, range], clamped to [0, 1]."""
    if noise_range < 0:
        raise GeometryError(f"noise range must be >= 0, got {noise_range}")
    if noise_range == 0:
        return PointSet(ps.points.copy())
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-noise_range, noise_range, size=ps.points.shape)
    return PointSet(np.clip(ps.points + noise, 0.0, 1.0))


def write_points_csv(path, ps: PointSet) -> None:
    """Normalized coordinates as CSV with header z,y,x."""
    lines = ["z,y,x"]
    for z, y, x in ps.points:
        lines.append(f"{z:.17g},{y:.17g},{x:.17g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_points_csv(path) -> PointSet:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "z,y,x":
            raise GeometryError(f"unexpected CSV header {header!r}")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return PointSet(np.asarray(rows, dtype=np.float64))


def write_points_ply(path, ps: PointSet, dims) -> None:
    """ASCII PLY with x,y,z vertex properties in de-normalized voxel units."""
    d, h, w = dims
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(ps)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [f"{zyx[2] * w:.6f} {zyx[1] * h:.6f} {zyx[0] * d:.6f}" for zyx in ps.points]
    atomic_write_text(path, "\n".join(header + body) + "\n")
