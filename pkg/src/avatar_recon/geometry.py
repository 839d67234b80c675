"""Rigid-body math, forward kinematics, linear blend skinning and the weak
orthographic camera.

Transforms are carried as 4x4 homogeneous float64 arrays; a list of bone
transforms is an array of shape (J, 4, 4). Point functions accept either a
single point of shape (3,) or a batch of shape (N, 3).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_DET = 1e-8


class DegenerateWarpError(ValueError):
    """Blended skinning matrix is (numerically) singular."""


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle vector(s) to rotation matrices, shape (..., 3, 3)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta2 = np.sum(v * v, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    small = theta2 < 1e-12
    safe = np.where(small, 1.0, theta)
    # series limits: sin t / t -> 1 - t^2/6, (1 - cos t) / t^2 -> 1/2 - t^2/24
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def make_transform(linear=None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if linear is not None:
        T[:3, :3] = linear
    if translation is not None:
        T[:3, 3] = translation
    return T


def apply_transform(T: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ T[:3, :3].T + T[:3, 3]


@dataclass
class Skeleton:
    joints: np.ndarray  # (J, 3) rest positions
    parents: np.ndarray  # (J,), parents[0] == -1

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        if len(self.joints) < 1 or len(self.parents) != len(self.joints):
            raise ValueError("skeleton needs >= 1 joint and one parent per joint")
        if self.parents[0] not in (-1, 0):
            raise ValueError("joint 0 must be the root")
        for j in range(1, len(self.parents)):
            if not 0 <= self.parents[j] < j:
                raise ValueError(f"joint {j}: parent must precede child, got {self.parents[j]}")

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass
class Pose:
    theta: np.ndarray  # (J, 3) axis-angle per joint

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("pose contains non-finite values")

    @classmethod
    def rest(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)))

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["theta"], dtype=np.float64))


def bone_transforms(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """B_j = G_j(theta) G_j(0)^-1 with rotations chained parent to child
    about the rest joint positions."""
    J = skeleton.n_joints
    if pose.theta.shape[0] != J:
        raise ValueError(f"pose has {pose.theta.shape[0]} joints, skeleton has {J}")
    R = rodrigues(pose.theta)
    G = np.zeros((J, 4, 4))
    for j in range(J):
        p = skeleton.parents[j]
        if j == 0 or p < 0:
            local = make_transform(R[j], skeleton.joints[j])
            G[j] = local
        else:
            local = make_transform(R[j], skeleton.joints[j] - skeleton.joints[p])
            G[j] = G[p] @ local
    B = G.copy()
    # G_j(0)^-1 is a pure translation by -J_j
    B[:, :3, 3] = G[:, :3, 3] - np.einsum("jab,jb->ja", G[:, :3, :3], skeleton.joints)
    return B


def blend_transforms(w, transforms: np.ndarray) -> np.ndarray:
    """Sum_j w_j B_j for weight rows w of shape (J,) or (N, J)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != transforms.shape[0]:
        raise ValueError(f"weight row length {w.shape[-1]} != {transforms.shape[0]} transforms")
    return np.tensordot(w, transforms, axes=([-1], [0]))


def lbs_forward(x_c, w, transforms: np.ndarray) -> np.ndarray:
    A = blend_transforms(w, transforms)
    x = np.asarray(x_c, dtype=np.float64)
    return np.einsum("...ab,...b->...a", A[..., :3, :3], x) + A[..., :3, 3]


def lbs_inverse(x_p, w, transforms: np.ndarray) -> np.ndarray:
    A = blend_transforms(w, transforms)
    L = A[..., :3, :3]
    det = np.linalg.det(L)
    if np.any(np.abs(det) <= DEGENERATE_DET):
        raise DegenerateWarpError(f"blend matrix determinant {np.min(np.abs(det)):.3e} <= {DEGENERATE_DET}")
    rhs = np.asarray(x_p, dtype=np.float64) - A[..., :3, 3]
    return np.linalg.solve(L, rhs[..., None])[..., 0]


def warp_linear(w, transforms: np.ndarray) -> np.ndarray:
    """Spatial Jacobian of the forward warp under locally constant weights."""
    return blend_transforms(w, transforms)[..., :3, :3]


@dataclass
class SkinnedTemplate:
    vertices: np.ndarray  # (V, 3) canonical
    faces: np.ndarray  # (F, 3)
    weights: np.ndarray  # (V, J)
    skeleton: Skeleton
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.vertices) == 0:
            raise ValueError("template has no vertices")
        if self.weights.shape != (len(self.vertices), self.skeleton.n_joints):
            raise ValueError(f"weights shape {self.weights.shape} does not match "
                             f"({len(self.vertices)}, {self.skeleton.n_joints})")
        if np.any(self.weights < 0) or np.max(np.abs(self.weights.sum(1) - 1)) > 1e-6:
            raise ValueError("skinning weight rows must be non-negative and sum to 1")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        self._tree = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.vertices)
        return self._tree

    def posed_vertices(self, pose: Pose) -> np.ndarray:
        return lbs_forward(self.vertices, self.weights, bone_transforms(self.skeleton, pose))

    def save(self, obj_path, json_path=None):
        from .meshing import TriMesh

        obj_path = Path(obj_path)
        json_path = Path(json_path) if json_path else obj_path.with_suffix(".json")
        TriMesh(self.vertices, self.faces).save_obj(obj_path)
        payload = {
            "joints": self.skeleton.joints.tolist(),
            "parents": self.skeleton.parents.tolist(),
            "weights": self.weights.tolist(),
        }
        payload.update(self.extras)
        json_path.write_text(json.dumps(payload))

    @classmethod
    def load(cls, obj_path, json_path=None) -> "SkinnedTemplate":
        from .meshing import TriMesh

        obj_path = Path(obj_path)
        json_path = Path(json_path) if json_path else obj_path.with_suffix(".json")
        mesh = TriMesh.load_obj(obj_path)
        payload = json.loads(json_path.read_text())
        skel = Skeleton(np.asarray(payload.pop("joints")), np.asarray(payload.pop("parents")))
        weights = np.asarray(payload.pop("weights"))
        return cls(mesh.vertices, mesh.faces, weights, skel, extras=payload)


def query_skin_weights(points, template: SkinnedTemplate) -> np.ndarray:
    """Weight row of the nearest template vertex; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    k = min(8, len(template.vertices))
    d, idx = template.tree.query(pts, k=k)
    d = d.reshape(len(pts), k)
    idx = idx.reshape(len(pts), k)
    tied = d <= d[:, :1]
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    out = template.weights[best]
    return out[0] if single else out


@dataclass
class Camera:
    """Weak orthographic camera. The front camera looks down -z (it sees
    surfaces whose normals have positive z); the back camera sees the
    model mirrored in x and z."""

    scale: float
    translation: tuple = (0.0, 0.0)
    image_size: tuple = (256, 256)  # (H, W)
    facing: str = "front"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        if self.facing not in ("front", "back"):
            raise ValueError(f"unknown camera facing {self.facing!r}")
        self.translation = tuple(float(t) for t in self.translation)
        self.image_size = tuple(int(s) for s in self.image_size)

    @property
    def center(self) -> np.ndarray:
        H, W = self.image_size
        return np.array([(W - 1) / 2.0, (H - 1) / 2.0])

    @property
    def view_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0 if self.facing == "front" else -1.0])

    def _mirror(self, x):
        x = np.array(x, dtype=np.float64, copy=True)
        if self.facing == "back":
            x[..., 0] *= -1
            x[..., 2] *= -1
        return x

    def project(self, x_p) -> np.ndarray:
        """Continuous pixel coordinates (u, v); texel (row i, col j) is centred at (j, i)."""
        x = self._mirror(x_p)
        uv = self.scale * np.stack([x[..., 0], -x[..., 1]], axis=-1)
        return uv + np.asarray(self.translation) + self.center

    def depth(self, x_p) -> np.ndarray:
        """Larger is closer to the camera."""
        return self._mirror(x_p)[..., 2]

    def image_to_world_normal(self, n_img) -> np.ndarray:
        n = np.array(n_img, dtype=np.float64, copy=True)
        n[..., 1] *= -1
        return self._mirror(n)

    # the axis change is an involution
    world_to_image_normal = image_to_world_normal

    def to_json(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation),
                "image_size": list(self.image_size), "facing": self.facing}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(d["scale"], tuple(d.get("translation", (0, 0))), tuple(d["image_size"]), d.get("facing", "front"))

    def flipped(self) -> "Camera":
        return Camera(self.scale, self.translation, self.image_size,
                      "back" if self.facing == "front" else "front")


def camera_pair(resolution: int = 256, extent: float = 1.0, margin: float = 0.9):
    """Front/back cameras framing the cube [-extent, extent]^3."""
    scale = margin * (resolution - 1) / (2.0 * extent)
    front = Camera(scale, (0.0, 0.0), (resolution, resolution), "front")
    return front, front.flipped()


def project(camera: Camera, x_p) -> np.ndarray:
    return camera.project(x_p)


def canonical_normal(n_p, w, transforms: np.ndarray, camera: Camera) -> np.ndarray:
    """n_c = unit(A_lin^T n_world) for a single image-space normal."""
    n_p = np.asarray(n_p, dtype=np.float64)
    if not np.linalg.norm(n_p) > 0:
        raise ValueError("zero-length normal")
    n_world = camera.image_to_world_normal(n_p)
    n_c = warp_linear(w, transforms).T @ n_world
    return n_c / np.linalg.norm(n_c)


def canonical_normals(n_p, w, transforms: np.ndarray, camera: Camera, eps: float = 1e-8):
    """Batched canonical_normal. Rows whose input or output is shorter than
    eps come back as zeros with valid=False instead of raising."""
    n_world = camera.image_to_world_normal(n_p)
    L = warp_linear(w, transforms)
    n_c = np.einsum("nba,nb->na", L, n_world)
    norm = np.linalg.norm(n_c, axis=-1)
    valid = (np.linalg.norm(n_p, axis=-1) > eps) & (norm > eps)
    n_c = np.where(valid[:, None], n_c / np.where(valid, norm, 1.0)[:, None], 0.0)
    return n_c, valid


def select_side(surface_normal, front: Camera | None = None) -> np.ndarray:
    """'front' where the normal's component along the front view axis is >= 0."""
    axis = front.view_axis if front is not None else np.array([0.0, 0.0, 1.0])
    n = np.asarray(surface_normal, dtype=np.float64)
    is_front = n @ axis >= 0
    if np.ndim(is_front) == 0:
        return "front" if is_front else "back"
    return np.where(is_front, "front", "back")
