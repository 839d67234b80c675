"""Triangle meshes, OBJ I/O, zero-isosurface extraction and analytic SDFs."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

DEGENERATE_AREA = 1e-12


class EmptySurfaceError(ValueError):
    """The field has no zero crossing inside the grid."""


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        t = self.triangles
        return np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        c = self.face_cross()
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], c)
        n = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(n > 0, n, 1.0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def bbox(self) -> np.ndarray:
        return np.stack([self.vertices.min(0), self.vertices.max(0)])

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces.copy())

    def cleaned(self, min_area: float = DEGENERATE_AREA) -> "TriMesh":
        """Drop faces with area below min_area and unreferenced vertices."""
        faces = self.faces[self.face_areas() >= min_area]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(self.vertices[used], remap[faces])

    def save_obj(self, path, with_normals: bool = True):
        path = Path(path)
        lines = ["# avatar_recon mesh"]
        lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in self.vertices]
        if with_normals and len(self.faces):
            vn = self.normals if self.normals is not None else self.vertex_normals()
            lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vn]
            lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in self.faces + 1]
        else:
            lines += [f"f {a} {b} {c}" for a, b, c in self.faces + 1]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path) -> "TriMesh":
        verts, normals, faces = [], [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
        mesh = cls(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
        if len(normals) == len(verts) and normals:
            mesh.normals = np.asarray(normals)
        return mesh


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform samples; returns (points, face indices)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    fid = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles[fid]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return pts, fid


def grid_points(bbox, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis sample coordinates of a resolution^3 lattice spanning bbox."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    axes = [np.linspace(bbox[0, k], bbox[1, k], resolution) for k in range(3)]
    return axes, (bbox[1] - bbox[0]) / (resolution - 1)


def evaluate_grid(field, bbox, resolution: int, slab: int = 8) -> np.ndarray:
    """Evaluate field on the lattice, ``slab`` x-planes at a time. Returns
    an array indexed [ix, iy, iz]."""
    axes, _ = grid_points(bbox, resolution)
    ys, zs = np.meshgrid(axes[1], axes[2], indexing="ij")
    plane = np.stack([ys.ravel(), zs.ravel()], 1)
    vol = np.empty((resolution, resolution, resolution))
    for s in range(0, resolution, slab):
        xs = axes[0][s:s + slab]
        pts = np.concatenate([np.c_[np.full(len(plane), x), plane] for x in xs])
        vals = np.asarray(field(pts), dtype=np.float64).reshape(len(xs), resolution, resolution)
        vol[s:s + len(xs)] = vals
    return vol


def marching_cubes(field, bbox, resolution: int = 128, volume: np.ndarray | None = None) -> TriMesh:
    """Zero isosurface of ``field`` (callable on (N, 3) points) with faces
    oriented so normals point toward increasing field values."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    vol = evaluate_grid(field, bbox, resolution) if volume is None else volume
    if not np.all(np.isfinite(vol)):
        raise ValueError("field produced non-finite values")
    if vol.min() >= 0 or vol.max() <= 0:
        raise EmptySurfaceError("field does not change sign inside the grid")
    _, spacing = grid_points(bbox, resolution)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(spacing), allow_degenerate=False)
    mesh = TriMesh(verts + bbox[0], faces).cleaned()
    if mesh.is_empty:
        raise EmptySurfaceError("extraction produced no faces")
    return mesh


# -- analytic signed distance functions -------------------------------------

@dataclass
class Sphere:
    radius: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __call__(self, x) -> np.ndarray:
        return np.linalg.norm(np.asarray(x) - self.center, axis=-1) - self.radius

    def gradient(self, x) -> np.ndarray:
        d = np.asarray(x) - self.center
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def segment_closest(x, a, b):
    """Closest points on segment ab and their parameter t in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    ab = b - a
    t = np.clip(((x - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return a + t[..., None] * ab, t


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    def axis_distance(self, x) -> np.ndarray:
        c, _ = segment_closest(x, self.a, self.b)
        return np.linalg.norm(np.asarray(x) - c, axis=-1)

    def __call__(self, x) -> np.ndarray:
        return self.axis_distance(x) - self.radius

    def gradient(self, x) -> np.ndarray:
        c, _ = segment_closest(x, self.a, self.b)
        d = np.asarray(x) - c
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class CapsuleUnion:
    """min over capsules; an exact SDF only outside overlap regions."""

    capsules: list

    def values(self, x) -> np.ndarray:
        return np.stack([c(x) for c in self.capsules], axis=-1)

    def __call__(self, x) -> np.ndarray:
        return self.values(x).min(axis=-1)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        k = self.values(x).argmin(axis=-1)
        grads = np.stack([c.gradient(x) for c in self.capsules], axis=-2)
        return np.take_along_axis(grads, k[..., None, None], axis=-2)[..., 0, :]

    def unique_argmin(self, x, margin: float = 1e-6) -> np.ndarray:
        v = np.sort(self.values(x), axis=-1)
        return v[..., 1] - v[..., 0] > margin if v.shape[-1] > 1 else np.ones(v.shape[:-1], bool)


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        v = np.concatenate([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([np.c_[a, ab, ca], np.c_[b, bc, ab], np.c_[c, ca, bc], np.c_[ab, bc, ca]])
    return TriMesh(v * radius, f)
