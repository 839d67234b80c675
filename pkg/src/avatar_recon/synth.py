"""Synthetic articulated capsule bodies, poses and rendered normal maps."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import NormalImage
from .geometry import Camera, Pose, Skeleton, SkinnedTemplate, bone_transforms, lbs_forward
from .meshing import Capsule, CapsuleUnion, TriMesh, marching_cubes, segment_closest

log = logging.getLogger(__name__)

# canonical A-pose, y up, facing +z; roughly 1.8 units tall
JOINT_NAMES = ["pelvis", "chest", "neck", "head",
               "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
               "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle"]
REST_JOINTS = np.array([
    [0.0, 0.0, 0.0], [0.0, 0.38, 0.0], [0.0, 0.55, 0.0], [0.0, 0.78, 0.0],
    [0.17, 0.5, 0.0], [0.42, 0.4, 0.0], [0.66, 0.3, 0.0],
    [-0.17, 0.5, 0.0], [-0.42, 0.4, 0.0], [-0.66, 0.3, 0.0],
    [0.1, -0.06, 0.0], [0.12, -0.46, 0.0], [0.13, -0.84, 0.0],
    [-0.1, -0.06, 0.0], [-0.12, -0.46, 0.0], [-0.13, -0.84, 0.0],
])
PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14])
# (parent joint, child joint, radius); the segment is driven by the parent joint
BONES = [(0, 1, 0.13), (1, 2, 0.05), (2, 3, 0.1),
         (1, 4, 0.07), (4, 5, 0.05), (5, 6, 0.042),
         (1, 7, 0.07), (7, 8, 0.05), (8, 9, 0.042),
         (0, 10, 0.1), (10, 11, 0.075), (11, 12, 0.058),
         (0, 13, 0.1), (13, 14, 0.075), (14, 15, 0.058)]
# symmetric per-joint rotation limits (radians) used by pose_sampler
JOINT_LIMITS = np.array([
    [0.15, 0.4, 0.1], [0.25, 0.3, 0.2], [0.3, 0.4, 0.2], [0.0, 0.0, 0.0],
    [0.2, 0.3, 0.5], [0.0, 0.9, 0.2], [0.0, 0.0, 0.0],
    [0.2, 0.3, 0.5], [0.0, 0.9, 0.2], [0.0, 0.0, 0.0],
    [0.6, 0.2, 0.3], [0.9, 0.0, 0.0], [0.0, 0.0, 0.0],
    [0.6, 0.2, 0.3], [0.9, 0.0, 0.0], [0.0, 0.0, 0.0],
])


@dataclass
class BodyLayout:
    joints: np.ndarray = field(default_factory=lambda: REST_JOINTS.copy())
    parents: np.ndarray = field(default_factory=lambda: PARENTS.copy())
    bones: list = field(default_factory=lambda: list(BONES))

    def to_json(self) -> dict:
        return {"joints": np.asarray(self.joints).tolist(), "parents": np.asarray(self.parents).tolist(),
                "bones": [list(b) for b in self.bones]}

    @classmethod
    def from_json(cls, d: dict) -> "BodyLayout":
        return cls(np.asarray(d["joints"], dtype=np.float64), np.asarray(d["parents"]),
                   [(int(a), int(b), float(r)) for a, b, r in d["bones"]])

    def capsules(self, joints=None) -> CapsuleUnion:
        J = self.joints if joints is None else joints
        return CapsuleUnion([Capsule(J[a], J[b], r) for a, b, r in self.bones])


def single_capsule_layout(length: float = 0.8, radius: float = 0.15) -> BodyLayout:
    joints = np.array([[0.0, -length / 2, 0.0], [0.0, length / 2, 0.0]])
    return BodyLayout(joints, np.array([-1, 0]), [(0, 1, radius)])


def vary_layout(layout: BodyLayout, rng: np.random.Generator, amount: float = 0.1) -> BodyLayout:
    """Random subject: per-bone radius and global width/height scaling."""
    joints = layout.joints * np.array([1 + rng.uniform(-amount, amount), 1 + rng.uniform(-amount / 2, amount / 2), 1.0])
    bones = [(a, b, r * (1 + rng.uniform(-amount, amount) * 2)) for a, b, r in layout.bones]
    return BodyLayout(joints, layout.parents.copy(), bones)


def _segment_distance(p0, p1, q0, q1, n: int = 33) -> float:
    t = np.linspace(0, 1, n)[:, None]
    pts = p0 + t * (p1 - p0)
    c, _ = segment_closest(pts, q0, q1)
    return float(np.linalg.norm(pts - c, axis=1).min())


def check_layout(layout: BodyLayout, tol: float = 0.0):
    """Reject layouts where bones three or more hops apart overlap."""
    n = len(layout.bones)
    adj = np.full((n, n), 99)
    for i, (a1, b1, _) in enumerate(layout.bones):
        for j, (a2, b2, _) in enumerate(layout.bones):
            if i == j:
                adj[i, j] = 0
            elif {a1, b1} & {a2, b2}:
                adj[i, j] = 1
    for k in range(n):
        adj = np.minimum(adj, adj[:, k:k + 1] + adj[k:k + 1, :])
    J = layout.joints
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j] < 3:
                continue
            a1, b1, r1 = layout.bones[i]
            a2, b2, r2 = layout.bones[j]
            if _segment_distance(J[a1], J[b1], J[a2], J[b2]) < r1 + r2 - tol:
                raise ValueError(f"bones {i} and {j} intersect")


def skin_weights(points, layout: BodyLayout, power: float = 4.0, eps: float = 1e-4) -> np.ndarray:
    """Normalised inverse distance to the two nearest bones (by owning joint)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    J = len(layout.joints)
    dist = np.full((len(pts), J), np.inf)
    for a, b, _ in layout.bones:
        c, _ = segment_closest(pts, layout.joints[a], layout.joints[b])
        dist[:, a] = np.minimum(dist[:, a], np.linalg.norm(pts - c, axis=1))
    order = np.argsort(dist, axis=1, kind="stable")[:, :2]
    w = np.zeros((len(pts), J))
    rows = np.arange(len(pts))[:, None]
    d2 = dist[rows, order]
    inv = np.where(np.isfinite(d2), 1.0 / (d2 + eps) ** power, 0.0)
    w[rows, order] = inv / inv.sum(1, keepdims=True)
    return w


def make_capsule_body(layout: BodyLayout | None = None, seed: int = 0, resolution: int = 96,
                      extent: float = 1.0, vary: float = 0.1, power: float = 4.0):
    """Returns (SkinnedTemplate, CapsuleUnion SDF, TriMesh) in canonical pose."""
    rng = np.random.default_rng(seed)
    base = layout or BodyLayout()
    if vary > 0 and layout is None:
        # redraw until no far-apart bones overlap
        for _ in range(100):
            body = vary_layout(base, rng, vary)
            try:
                check_layout(body)
                break
            except ValueError:
                continue
        else:
            raise ValueError("could not draw a valid body layout")
    else:
        body = base
        check_layout(body)
    sdf = body.capsules()
    bbox = np.array([[-extent] * 3, [extent] * 3])
    mesh = marching_cubes(sdf, bbox, resolution)
    skel = Skeleton(body.joints, body.parents)
    weights = skin_weights(mesh.vertices, body, power)
    template = SkinnedTemplate(mesh.vertices, mesh.faces, weights, skel, extras={"layout": body.to_json()})
    return template, sdf, mesh


def clothe(template: SkinnedTemplate | TriMesh, amplitude: float = 0.03, n_waves: int = 6,
           max_freq: float = 3.0, seed: int = 0, min_freq: float = 1.0) -> TriMesh:
    """Displace vertices along their normals by a band-limited random field
    bounded by ``amplitude``."""
    mesh = TriMesh(template.vertices, template.faces)
    if amplitude == 0:
        return TriMesh(mesh.vertices.copy(), mesh.faces.copy())
    rng = np.random.default_rng(seed)
    freqs = rng.normal(size=(n_waves, 3))
    freqs *= (rng.uniform(min_freq, max_freq, size=n_waves) * np.pi / np.linalg.norm(freqs, axis=1))[:, None]
    phase = rng.uniform(0, 2 * np.pi, n_waves)
    amp = rng.uniform(0.5, 1.0, n_waves)
    field_ = (np.sin(mesh.vertices @ freqs.T + phase) * amp).sum(1) / amp.sum()
    disp = amplitude * field_
    return TriMesh(mesh.vertices + disp[:, None] * mesh.vertex_normals(), mesh.faces.copy())


def pose_sampler(rng: np.random.Generator, limits=JOINT_LIMITS) -> Pose:
    lim = np.asarray(limits, dtype=np.float64)
    if not np.all(np.isfinite(lim)):
        raise ValueError("joint limits must be finite")
    return Pose(rng.uniform(-1.0, 1.0, size=lim.shape) * lim)


def pose_mesh(mesh: TriMesh, template: SkinnedTemplate, pose: Pose) -> TriMesh:
    """Warp a mesh that shares the template's vertex indexing."""
    B = bone_transforms(template.skeleton, pose)
    return TriMesh(lbs_forward(mesh.vertices, template.weights, B), mesh.faces.copy())


# -- rasterisation ------------------------------------------------------------

def rasterize(mesh: TriMesh, camera: Camera, chunk: int = 200_000):
    """Z-buffer rasterisation at texel centres. Returns (normals in image
    convention (H, W, 3), coverage mask (H, W))."""
    H, W = camera.image_size
    uv = camera.project(mesh.vertices)
    depth = camera.depth(mesh.vertices)
    vn = camera.world_to_image_normal(mesh.vertex_normals())
    F_ = mesh.faces
    tu, tv, tz = uv[F_, 0], uv[F_, 1], depth[F_]
    j0 = np.clip(np.ceil(tu.min(1) - 1e-9), 0, W).astype(np.int64)
    j1 = np.clip(np.floor(tu.max(1) + 1e-9), -1, W - 1).astype(np.int64)
    i0 = np.clip(np.ceil(tv.min(1) - 1e-9), 0, H).astype(np.int64)
    i1 = np.clip(np.floor(tv.max(1) + 1e-9), -1, H - 1).astype(np.int64)
    nw = np.maximum(j1 - j0 + 1, 0)
    nh = np.maximum(i1 - i0 + 1, 0)
    counts = nw * nh
    zbuf = np.full(H * W, -np.inf)
    nbuf = np.zeros((H * W, 3))
    faces_with = np.nonzero(counts)[0]
    # process triangles in groups so the candidate list stays bounded
    starts = np.concatenate([[0], np.cumsum(counts[faces_with])])
    g0 = 0
    while g0 < len(faces_with):
        g1 = int(np.searchsorted(starts, starts[g0] + chunk, side="right")) - 1
        g1 = max(g1, g0 + 1)
        fs = faces_with[g0:g1]
        c = counts[fs]
        fi = np.repeat(fs, c)
        local = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        jj = j0[fi] + local % nw[fi]
        ii = i0[fi] + local // nw[fi]
        px, py = jj.astype(np.float64), ii.astype(np.float64)
        x0, x1, x2 = tu[fi, 0], tu[fi, 1], tu[fi, 2]
        y0, y1, y2 = tv[fi, 0], tv[fi, 1], tv[fi, 2]
        den = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        ok = np.abs(den) > 1e-14
        den = np.where(ok, den, 1.0)
        l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / den
        l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / den
        l2 = 1 - l0 - l1
        inside = ok & (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        fi, ii, jj = fi[inside], ii[inside], jj[inside]
        l = np.stack([l0[inside], l1[inside], l2[inside]], 1)
        z = np.einsum("nk,nk->n", l, tz[fi])
        pix = ii * W + jj
        # keep the nearest fragment per pixel (ties -> lowest face index)
        order = np.lexsort((fi, -z, pix))
        pix, z, fi, l = pix[order], z[order], fi[order], l[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, z, fi, l = pix[first], z[first], fi[first], l[first]
        closer = z > zbuf[pix]
        pix, z, fi, l = pix[closer], z[closer], fi[closer], l[closer]
        zbuf[pix] = z
        nbuf[pix] = np.einsum("nk,nkc->nc", l, vn[F_[fi]])
        g0 = g1
    mask = np.isfinite(zbuf)
    n = np.linalg.norm(nbuf, axis=1, keepdims=True)
    nbuf = np.where(mask[:, None] & (n > 0), nbuf / np.where(n > 0, n, 1.0), 0.0)
    return nbuf.reshape(H, W, 3), mask.reshape(H, W)


def perturb_normals(normals, mask, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on the two tangent components, then renormalise."""
    if sigma <= 0:
        return normals
    n = normals.reshape(-1, 3)
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    t1 = np.cross(n, helper)
    t1 /= np.maximum(np.linalg.norm(t1, axis=1, keepdims=True), 1e-12)
    t2 = np.cross(n, t1)
    e = rng.normal(scale=sigma, size=(len(n), 2))
    out = n + e[:, :1] * t1 + e[:, 1:] * t2
    out /= np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
    out = np.where(mask.reshape(-1, 1), out, 0.0)
    return out.reshape(normals.shape)


def render_normal_maps(mesh: TriMesh, cameras, noise_sigma: float = 0.0, seed: int = 0):
    """Front and back NormalImages of mesh under a (front, back) camera pair."""
    if mesh.is_empty:
        raise ValueError("cannot render an empty mesh")
    rng = np.random.default_rng(seed)
    out = []
    for cam in cameras:
        n, m = rasterize(mesh, cam)
        n = perturb_normals(n, m, noise_sigma, rng)
        out.append(NormalImage(n, m, cam.facing))
    return tuple(out)


# -- dataset --------------------------------------------------------------------

def generate_dataset(out_dir, n_subjects: int = 8, n_poses: int = 12, seed: int = 0, resolution: int = 96,
                     image_size: int = 256, amplitude: float = 0.03, noise_sigma: float = 0.0,
                     extent: float = 1.0) -> dict:
    """Write subject_###/{template.obj, template.json, clothed.obj, poses/, renders/}
    plus manifest.json; returns the manifest."""
    from .geometry import camera_pair

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    front, back = camera_pair(image_size, extent)
    ss = np.random.SeedSequence(seed)
    manifest = {"seed": seed, "cameras": {"front": front.to_json(), "back": back.to_json()},
                "extent": extent, "subjects": []}
    for s, child in enumerate(ss.spawn(n_subjects)):
        body_seed, cloth_seed, pose_seed, noise_seed = (int(x) for x in child.generate_state(4))
        template, _, _ = make_capsule_body(seed=body_seed, resolution=resolution, extent=extent)
        clothed = clothe(template, amplitude=amplitude, seed=cloth_seed)
        sdir = out / f"subject_{s:03d}"
        (sdir / "poses").mkdir(parents=True, exist_ok=True)
        (sdir / "renders").mkdir(parents=True, exist_ok=True)
        template.save(sdir / "template.obj", sdir / "template.json")
        clothed.save_obj(sdir / "clothed.obj")
        rng = np.random.default_rng(pose_seed)
        poses = []
        for p in range(n_poses):
            pose = Pose.rest(template.skeleton.n_joints) if p == 0 else pose_sampler(rng)
            (sdir / "poses" / f"pose_{p:03d}.json").write_text(json.dumps(pose.to_json()))
            posed = pose_mesh(clothed, template, pose)
            f_img, b_img = render_normal_maps(posed, (front, back), noise_sigma, seed=noise_seed + p)
            f_img.save_png(sdir / "renders" / f"pose_{p:03d}_front.png")
            b_img.save_png(sdir / "renders" / f"pose_{p:03d}_back.png")
            poses.append(f"pose_{p:03d}")
        manifest["subjects"].append({"name": sdir.name, "body_seed": body_seed, "cloth_seed": cloth_seed,
                                     "pose_seed": pose_seed, "poses": poses})
        log.info("subject %d written", s)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
