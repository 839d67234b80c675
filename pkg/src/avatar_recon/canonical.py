"""Canonical implicit model: F(pixel feature, canonical normal, x_c) trained
jointly with the normal-image encoder, and its zero-set extraction."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import sdf_net
from .config import CanonicalConfig
from .encoder import EncoderSpec, NormalImage, encode, image_tensor, init_encoder, pixel_feature, pixel_normal
from .geometry import (DEGENERATE_DET, Camera, Pose, SkinnedTemplate, bone_transforms, canonical_normals,
                       lbs_forward, query_skin_weights, warp_linear)
from .meshing import TriMesh, marching_cubes
from .training import (DTYPES, LossLog, OptimizerState, adam_step, check_finite, sample_batch, sdf_losses)

log = logging.getLogger(__name__)


@dataclass
class View:
    """One posed observation of a subject, optionally with its canonical GT."""
    template: SkinnedTemplate
    pose: Pose
    image: NormalImage
    camera: Camera
    gt_mesh: TriMesh | None = None
    name: str = ""

    def transforms(self) -> np.ndarray:
        return bone_transforms(self.template.skeleton, self.pose)


@dataclass
class CanonicalModel:
    f_spec: sdf_net.MlpSpec
    enc_spec: EncoderSpec
    f_params: torch.Tensor
    enc_params: torch.Tensor

    def flat(self) -> torch.Tensor:
        return torch.cat([self.f_params, self.enc_params])

    def with_flat(self, flat: torch.Tensor) -> "CanonicalModel":
        n = self.f_spec.n_params
        return CanonicalModel(self.f_spec, self.enc_spec, flat[:n], flat[n:])

    def save(self, path, meta: dict | None = None):
        sdf_net.save_checkpoint(path, {"f": (self.f_spec.to_json(), self.f_params),
                                       "encoder": (self.enc_spec.to_json(), self.enc_params)}, meta)

    @classmethod
    def load(cls, path) -> "CanonicalModel":
        blocks, _ = sdf_net.load_checkpoint(path)
        if "f" not in blocks or "encoder" not in blocks:
            raise ValueError(f"{path} is not a canonical model checkpoint")
        (fs, f), (es, e) = blocks["f"], blocks["encoder"]
        return cls(sdf_net.MlpSpec.from_json(fs), EncoderSpec.from_json(es), torch.from_numpy(f), torch.from_numpy(e))


def model_specs(cfg: CanonicalConfig) -> tuple[sdf_net.MlpSpec, EncoderSpec]:
    enc = EncoderSpec(tuple(cfg.encoder_channels))
    f = sdf_net.coordinate_spec(hidden=tuple(cfg.hidden), n_features=enc.out_channels + 3,
                                n_freqs=cfg.n_freqs, skip_in=tuple(cfg.skip_in))
    return f, enc


def init_model(cfg: CanonicalConfig, seed: int = 0) -> CanonicalModel:
    f_spec, enc_spec = model_specs(cfg)
    f = sdf_net.geometric_init(f_spec, cfg.init_radius, seed).values
    e = init_encoder(enc_spec, seed + 1)
    return CanonicalModel(f_spec, enc_spec, f, e)


def gather_inputs(x_c, view: View, transforms: np.ndarray, fmap, dtype=torch.float32):
    """Network input rows [feature | n_c | x_c] for canonical points, plus a
    keep mask that is False where the blended warp is degenerate."""
    x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    w = query_skin_weights(x_c, view.template)
    keep = np.abs(np.linalg.det(warp_linear(w, transforms))) > DEGENERATE_DET
    x_p = lbs_forward(x_c, w, transforms)
    uv = view.camera.project(x_p)
    phi = pixel_feature(fmap, uv).to(dtype)
    n_p, _ = pixel_normal(view.image, uv)
    with np.errstate(invalid="ignore", divide="ignore"):
        n_c, _ = canonical_normals(n_p, w, transforms, view.camera)
    rest = torch.as_tensor(np.concatenate([n_c, x_c], 1), dtype=dtype)
    return torch.cat([phi, rest], 1), keep


def train_canonical(views: list[View], cfg: CanonicalConfig, seed: int = 0, model: CanonicalModel | None = None,
                    callback=None) -> tuple[CanonicalModel, LossLog]:
    """Jointly optimise F and the encoder on canonical-space samples warped
    into each view. One view per step."""
    if not views:
        raise ValueError("no training views")
    if any(v.gt_mesh is None for v in views):
        raise ValueError("every training view needs a canonical ground-truth mesh")
    dt = DTYPES[cfg.dtype]
    model = model or init_model(cfg, seed)
    f_spec, enc_spec = model.f_spec, model.enc_spec
    nf = f_spec.n_params
    rng = np.random.default_rng(seed)
    params = model.flat().to(dt)
    state = OptimizerState.create(params, cfg.optim)
    s = cfg.sampling
    bbox = np.array([[-s.extent] * 3, [s.extent] * 3])
    transforms = [v.transforms() for v in views]
    images = [image_tensor(v.image, dt) for v in views]
    log_ = LossLog()
    for step in range(cfg.steps):
        k = int(rng.integers(len(views)))
        view = views[k]
        batch = sample_batch(view.gt_mesh, (s.n_surface, s.n_near, s.n_uniform), s.sigma, bbox, rng)
        p = params.detach().requires_grad_(True)
        fmap = encode(images[k], p[nf:], enc_spec)
        surf, keep_s = gather_inputs(batch.surface_points, view, transforms[k], fmap, dt)
        dom, keep_d = gather_inputs(batch.domain_points, view, transforms[k], fmap, dt)
        dropped = int((~keep_s).sum() + (~keep_d).sum())
        if dropped:
            log.info("step %d: dropped %d samples with degenerate warps", step, dropped)
        ks, kd = torch.from_numpy(keep_s), torch.from_numpy(keep_d)
        targets = torch.as_tensor(batch.surface_normals, dtype=dt)[ks]
        total, parts = sdf_losses(p[:nf], f_spec, surf[ks], targets, dom[kd], cfg.losses)
        (g,) = torch.autograd.grad(total, p)
        lr = state.current_lr()
        params, state = adam_step(state, params, g)
        check_finite(step, total, params)
        log_.append(step, [x.item() for x in parts], total.item(), lr)
        if step % 50 == 0:
            log.debug("step %d total %.5f", step, total.item())
        if callback is not None:
            callback(step, params, log_)
    out = model.with_flat(params.detach().to(torch.float64))
    return out, log_


def canonical_bbox(template: SkinnedTemplate, pad: float = 0.1) -> np.ndarray:
    lo, hi = template.vertices.min(0), template.vertices.max(0)
    margin = pad * (hi - lo).max()
    return np.array([lo - margin, hi + margin])


def canonical_field(model: CanonicalModel, view: View, dtype=torch.float32, chunk: int = 32768):
    """Callable (N, 3) canonical points -> (N,) SDF values for one view."""
    B = view.transforms()
    with torch.no_grad():
        fmap = encode(image_tensor(view.image, dtype), model.enc_params.to(dtype), model.enc_spec)
    f = model.f_params.to(dtype)

    def field(x):
        out = []
        with torch.no_grad():
            for s in range(0, len(x), chunk):
                rows, _ = gather_inputs(x[s:s + chunk], view, B, fmap, dtype)
                out.append(sdf_net.forward(f, model.f_spec, rows).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    return field


def reconstruct_canonical(model: CanonicalModel, view: View, resolution: int = 96, bbox=None,
                          dtype=torch.float32) -> TriMesh:
    """Zero-set of F in canonical space for one observation."""
    bbox = canonical_bbox(view.template) if bbox is None else np.asarray(bbox, dtype=np.float64)
    return marching_cubes(canonical_field(model, view, dtype), bbox, resolution)


# -- dataset access ------------------------------------------------------------

def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    return json.loads(path.read_text())


def load_view(dataset_dir, subject: int | str, pose: int | str, with_gt: bool = True, side: str = "front") -> View:
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    sname = subject if isinstance(subject, str) else manifest["subjects"][subject]["name"]
    pname = pose if isinstance(pose, str) else f"pose_{pose:03d}"
    sdir = root / sname
    template = SkinnedTemplate.load(sdir / "template.obj", sdir / "template.json")
    p = Pose.from_json(json.loads((sdir / "poses" / f"{pname}.json").read_text()))
    image = NormalImage.load_png(sdir / "renders" / f"{pname}_{side}.png", side)
    camera = Camera.from_json(manifest["cameras"][side])
    gt = TriMesh.load_obj(sdir / "clothed.obj") if with_gt else None
    return View(template, p, image, camera, gt, f"{sname}/{pname}")


def load_views(dataset_dir, subjects=None, exclude_poses=()) -> list[View]:
    """All (subject, pose) views of a dataset except the excluded pose indices.
    Templates and GT meshes are shared between views of a subject."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    camera = Camera.from_json(manifest["cameras"]["front"])
    views = []
    entries = manifest["subjects"]
    idx = range(len(entries)) if subjects is None else subjects
    for i in idx:
        sname = entries[i]["name"]
        sdir = root / sname
        template = SkinnedTemplate.load(sdir / "template.obj", sdir / "template.json")
        gt = TriMesh.load_obj(sdir / "clothed.obj")
        for j, pname in enumerate(entries[i]["poses"]):
            if j in exclude_poses:
                continue
            p = Pose.from_json(json.loads((sdir / "poses" / f"{pname}.json").read_text()))
            image = NormalImage.load_png(sdir / "renders" / f"{pname}_front.png", "front")
            views.append(View(template, p, image, camera, gt, f"{sname}/{pname}"))
    return views
