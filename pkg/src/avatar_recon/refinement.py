"""Posed-space SDF refinement supervised by front and back normal maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import sdf_net
from .config import RefineConfig
from .encoder import NormalImage, bilinear
from .geometry import Camera, select_side
from .meshing import EmptySurfaceError, TriMesh, marching_cubes, sample_surface
from .training import (DTYPES, LossLog, OptimizerState, adam_step, check_finite, fit_sdf, sample_batch,
                       sdf_field, sdf_losses)

log = logging.getLogger(__name__)


class NormalTargets:
    """Front/back normal maps with their cameras; looks up world-space target
    normals and validity weights for posed points."""

    def __init__(self, images, cameras):
        front, back = images
        cf, cb = cameras
        if cf.facing != "front" or cb.facing != "back":
            raise ValueError("cameras must be a (front, back) pair")
        if front.shape != tuple(cf.image_size) or back.shape != tuple(cb.image_size):
            raise ValueError("normal map size does not match its camera")
        if cf.scale != cb.scale or cf.image_size != cb.image_size:
            raise ValueError("front and back cameras must share scale and image size")
        self.cameras = (cf, cb)
        self.grids = [self._grid(im) for im in (front, back)]

    @staticmethod
    def _grid(image: NormalImage) -> torch.Tensor:
        n = np.where(image.mask[..., None], image.normals, 0.0)
        g = np.dstack([n, image.mask.astype(np.float64)]).transpose(2, 0, 1)
        return torch.from_numpy(np.ascontiguousarray(g))

    def lookup(self, x, surface_normals):
        """(targets (N, 3) unit world normals, weights (N,)); the side for each
        point follows the sign of its surface normal along the front axis."""
        x = np.asarray(x, dtype=np.float64)
        side = select_side(surface_normals, self.cameras[0])
        side = np.atleast_1d(side)
        targets = np.zeros_like(x)
        weights = np.zeros(len(x))
        for k, name in enumerate(("front", "back")):
            sel = side == name
            if not sel.any():
                continue
            cam = self.cameras[k]
            out = bilinear(self.grids[k], cam.project(x[sel])).numpy()
            n = cam.image_to_world_normal(out[:, :3])
            norm = np.linalg.norm(n, axis=1)
            ok = norm > 1e-8
            n[ok] /= norm[ok, None]
            targets[sel] = n
            weights[sel] = np.where(ok, out[:, 3], 0.0)
        return targets, weights


def newton_project(vals, spec: sdf_net.MlpSpec, x, steps: int = 2, max_step: float = 0.1) -> np.ndarray:
    """Move points onto the zero-set along the field gradient."""
    x = torch.as_tensor(np.asarray(x), dtype=vals.dtype)
    for _ in range(steps):
        f, g = sdf_net.value_and_grad(vals.detach(), spec, x)
        g2 = (g * g).sum(1).clamp_min(1e-12)
        d = (f / g2)[:, None] * g
        n = d.norm(dim=1, keepdim=True)
        d = torch.where(n > max_step, d * (max_step / n.clamp_min(1e-12)), d)
        x = (x - d).detach()
    return x.double().numpy()


def iterations_to_threshold(totals, threshold: float, smooth: int = 50) -> int | None:
    """First iteration whose trailing mean loss over ``smooth`` iterations is
    at or below threshold, or None if never reached."""
    t = np.asarray(totals, dtype=np.float64)
    if len(t) == 0:
        return None
    c = np.cumsum(np.insert(t, 0, 0.0))
    idx = np.arange(1, len(t) + 1)
    lo = np.maximum(idx - smooth, 0)
    avg = (c[idx] - c[lo]) / (idx - lo)
    hit = np.nonzero(avg <= threshold)[0]
    return int(hit[0]) if len(hit) else None


@dataclass
class RefineResult:
    params: sdf_net.ParamVector
    mesh: TriMesh
    log: LossLog
    best_loss: float
    iterations: int
    stopped_early: bool
    best_history: list = field(default_factory=list)


def initial_params(mode: str, spec: sdf_net.MlpSpec, cfg: RefineConfig, seed: int = 0, coarse: TriMesh | None = None,
                   hyper=None, template_mesh: TriMesh | None = None, fit_steps: int = 300) -> sdf_net.ParamVector:
    """'hypernet' -> H(posed template); 'geometric' -> sphere of init_radius;
    'fit' -> plain SDF fit to the coarse posed mesh."""
    if mode == "hypernet":
        if hyper is None or template_mesh is None:
            raise ValueError("hypernet init needs a hyper-network and a posed template")
        from .hypernet import generated_params

        phi, hspec = hyper
        if hspec.g_spec != spec:
            raise ValueError("hyper-network output does not match the refinement network")
        return generated_params(phi, hspec, template_mesh)
    if mode == "geometric":
        return sdf_net.geometric_init(spec, cfg.init_radius, seed)
    if mode == "fit":
        if coarse is None:
            raise ValueError("fit init needs a coarse mesh")
        params, _ = fit_sdf(coarse, spec, fit_steps, cfg.sampling, cfg.losses, seed=seed,
                            init_radius=cfg.init_radius, dtype=cfg.dtype)
        return params
    raise ValueError(f"unknown init mode {mode!r}")


def refine(init: sdf_net.ParamVector, targets: NormalTargets, cfg: RefineConfig, seed: int = 0, bbox=None,
           anchor: TriMesh | None = None, callback=None) -> RefineResult:
    """Optimise G against the normal maps starting from init.

    Normal maps fix the surface only up to a depth offset per side, so an
    optional anchor mesh (the coarse posed reconstruction) adds
    ``anchor_weight * mean |G|`` over fresh samples of it to the surface term.
    """
    spec = init.spec
    dt = DTYPES[cfg.dtype]
    s = cfg.sampling
    bbox = np.array([[-s.extent] * 3, [s.extent] * 3]) if bbox is None else np.asarray(bbox, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = init.values.to(dt)
    state = OptimizerState.create(params, cfg.optim)
    log_ = LossLog()
    best_params, best_loss, history = params.clone(), np.inf, []
    surface = None
    stopped = False
    best_window, stalled = None, 0
    it = 0
    for it in range(cfg.max_iters):
        if it % cfg.refresh_every == 0:
            if it > 0:
                window_mean = float(np.mean(log_.totals()[-cfg.refresh_every:]))
                if window_mean < best_loss:
                    best_loss, best_params = window_mean, params.clone()
                history.append(best_loss)
            try:
                surface = marching_cubes(sdf_field(sdf_net.ParamVector(spec, params.double()), dtype=dt), bbox,
                                         cfg.mc_resolution)
            except EmptySurfaceError:
                if surface is None:
                    raise
                log.warning("iteration %d: zero-set vanished, keeping the previous surface samples", it)
        batch = sample_batch(surface, (s.n_surface, s.n_near, s.n_uniform), s.sigma, bbox, rng)
        x_s = newton_project(params, spec, batch.surface_points, cfg.newton_steps)
        with torch.no_grad():
            _, g = sdf_net.value_and_grad(params, spec, torch.as_tensor(x_s, dtype=dt))
        tgt, w = targets.lookup(x_s, g.double().numpy())
        # weighted mean over valid samples: surface that strays over the
        # background neither helps nor hurts the normal term
        w = w * (len(w) / w.sum()) if w.sum() > 0 else w
        p = params.detach().requires_grad_(True)
        total, parts = sdf_losses(p, spec, torch.as_tensor(x_s, dtype=dt), torch.as_tensor(tgt, dtype=dt),
                                  torch.as_tensor(batch.domain_points, dtype=dt), cfg.losses,
                                  surf_weights=torch.as_tensor(w, dtype=dt))
        if anchor is not None and cfg.anchor_weight > 0:
            a, _ = sample_surface(anchor, s.n_surface, rng)
            l_a = cfg.anchor_weight * sdf_net.forward(p, spec, torch.as_tensor(a, dtype=dt)).abs().mean()
            parts = (parts[0] + l_a, parts[1], parts[2])
            total = total + cfg.losses.lambda_i * l_a
        (grad,) = torch.autograd.grad(total, p)
        lr = state.current_lr()
        params, state = adam_step(state, params, grad)
        check_finite(it, total, params)
        log_.append(it, [x.item() for x in parts], total.item(), lr)
        if callback is not None:
            callback(it, params, log_)
        if (it + 1) % cfg.window == 0:
            # a window counts as stalled when it fails to beat the best window
            # by tol_rel; stop after ``patience`` stalled windows in a row
            cur = float(np.mean(log_.totals()[-cfg.window:]))
            if best_window is not None and (best_window - cur) / max(abs(best_window), 1e-12) < cfg.tol_rel:
                stalled += 1
                if stalled >= cfg.patience:
                    stopped = True
                    break
            else:
                stalled = 0
            best_window = cur if best_window is None else min(best_window, cur)
    tail = log_.totals()[-cfg.refresh_every:]
    if len(tail) and float(np.mean(tail)) < best_loss:
        best_loss, best_params = float(np.mean(tail)), params.clone()
    history.append(best_loss)
    result = sdf_net.ParamVector(spec, best_params.detach().to(torch.float64))
    mesh = marching_cubes(sdf_field(result, dtype=dt), bbox, cfg.out_resolution)
    return RefineResult(result, mesh, log_, best_loss, it + 1, stopped, history)
