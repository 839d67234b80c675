"""Point sampling, the three-term SDF loss, Adam, and a generic fitting loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import sdf_net
from .config import LossConfig, OptimConfig, SamplingConfig
from .meshing import TriMesh, sample_surface

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class SampleBatch:
    surface_points: np.ndarray  # (n_surf, 3)
    surface_normals: np.ndarray  # (n_surf, 3), unit
    domain_points: np.ndarray  # (n_near + n_uniform, 3)
    n_near: int = 0
    n_uniform: int = 0


def sample_batch(mesh: TriMesh, counts, sigma: float, bbox, rng: np.random.Generator) -> SampleBatch:
    """Surface samples with face normals, Gaussian near-surface samples and
    uniform samples inside bbox."""
    n_surf, n_near, n_uni = (int(c) for c in counts)
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if min(n_surf, n_near, n_uni) < 0 or n_surf + n_near + n_uni == 0:
        raise ValueError(f"bad sample counts {counts}")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    pts, fid = sample_surface(mesh, n_surf + n_near, rng)
    normals = mesh.face_normals()[fid[:n_surf]]
    near = pts[n_surf:] + rng.normal(scale=sigma, size=(n_near, 3))
    uni = rng.uniform(bbox[0], bbox[1], size=(n_uni, 3))
    return SampleBatch(pts[:n_surf], normals, np.concatenate([near, uni]), n_near, n_uni)


# -- losses -------------------------------------------------------------------

def _t(x, like=None):
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if torch.is_tensor(like) else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def loss_reconstruction(values, normals, targets, weights=None, norm: str = "l2"):
    """mean_i |F_i| + w_i ||n_i - t_i||; w defaults to 1."""
    values, normals, targets = _t(values), _t(normals), _t(targets)
    if not (values.shape[0] == normals.shape[0] == targets.shape[0]):
        raise ValueError("values, normals and targets must have equal length")
    diff = normals - targets.to(normals.dtype)
    nd = diff.norm(dim=-1) if norm == "l2" else diff.abs().sum(-1)
    if weights is not None:
        nd = nd * _t(weights).to(nd.dtype)
    return (values.abs() + nd).mean()


def loss_eikonal(gradients, form: str = "squared"):
    g = _t(gradients)
    if g.shape[0] == 0:
        raise ValueError("eikonal loss needs at least one gradient")
    r = g.norm(dim=-1) - 1
    return (r * r).mean() if form == "squared" else r.abs().mean()


def loss_offsurface(values, alpha: float):
    if not alpha > 1:
        raise ValueError("alpha must be > 1")
    return torch.exp(-alpha * _t(values).abs()).mean()


@dataclass
class LossWeights:
    lambda_i: float = 1.0
    lambda_eik: float = 0.1
    lambda_o: float = 0.1
    alpha: float = 100.0

    def __post_init__(self):
        vals = (self.lambda_i, self.lambda_eik, self.lambda_o, self.alpha)
        if not all(math.isfinite(v) for v in vals) or min(vals[:3]) < 0:
            raise ValueError("loss weights must be finite and non-negative")
        if not self.alpha > 1:
            raise ValueError("alpha must be > 1")

    @classmethod
    def from_config(cls, c: LossConfig) -> "LossWeights":
        return cls(c.lambda_i, c.lambda_eik, c.lambda_o, c.alpha)


def total_loss(parts, weights: LossWeights):
    """lambda_I L_I + lambda_eik L_eik + lambda_o L_o."""
    l_i, l_eik, l_o = parts
    terms = (weights.lambda_i * l_i, weights.lambda_eik * l_eik, weights.lambda_o * l_o)
    if not any(torch.is_tensor(t) for t in terms):
        return math.fsum(terms)
    # small terms first
    return terms[0] + (terms[1] + terms[2])


def sdf_losses(params, spec, surf_inputs, surf_targets, dom_inputs, loss_cfg: LossConfig, surf_weights=None):
    """(total, (L_I, L_eik, L_o)) for one batch, differentiable in params."""
    fs, gs = sdf_net.value_and_grad(params, spec, surf_inputs, create_graph=True)
    fd, gd = sdf_net.value_and_grad(params, spec, dom_inputs, create_graph=True)
    l_i = loss_reconstruction(fs, gs, surf_targets, surf_weights, loss_cfg.normal_norm)
    l_eik = loss_eikonal(gd, loss_cfg.eikonal_form)
    l_o = loss_offsurface(fd, loss_cfg.alpha)
    parts = (l_i, l_eik, l_o)
    return total_loss(parts, LossWeights.from_config(loss_cfg)), parts


# -- optimiser ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-3
    decay: float = 0.1
    decay_every_epochs: int = 3
    steps_per_epoch: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n_or_like, cfg: OptimConfig | None = None) -> "OptimizerState":
        cfg = cfg or OptimConfig()
        like = n_or_like if torch.is_tensor(n_or_like) else torch.zeros(int(n_or_like), dtype=torch.float64)
        return cls(torch.zeros_like(like), torch.zeros_like(like), 0, cfg.lr, cfg.decay, cfg.decay_every_epochs,
                   cfg.steps_per_epoch, cfg.beta1, cfg.beta2, cfg.eps)

    def current_lr(self) -> float:
        epoch = self.step // max(self.steps_per_epoch, 1)
        return self.lr * self.decay ** (epoch // max(self.decay_every_epochs, 1))


def adam_step(state: OptimizerState, params: torch.Tensor, grads: torch.Tensor):
    """One Adam update with the stepwise learning-rate schedule. Returns
    (new params, new state); inputs are not modified."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer moments must have equal shapes")
    lr = state.current_lr()
    t = state.step + 1
    m = torch.lerp(state.m, grads, 1 - state.beta1)
    v = torch.addcmul(state.v * state.beta2, grads, grads, value=1 - state.beta2)
    denom = v.div(1 - state.beta2 ** t).sqrt_().add_(state.eps)
    new = torch.addcdiv(params, m, denom, value=-lr / (1 - state.beta1 ** t))
    ns = OptimizerState(m, v, t, state.lr, state.decay, state.decay_every_epochs, state.steps_per_epoch,
                        state.beta1, state.beta2, state.eps)
    return new, ns


# -- logging ----------------------------------------------------------------------

LOG_FIELDS = ["step", "L_I", "L_eik", "L_o", "total", "lr"]


@dataclass
class LossLog:
    rows: list = field(default_factory=list)

    def append(self, step, parts, total, lr):
        self.rows.append([int(step)] + [float(p) for p in parts] + [float(total), float(lr)])

    def totals(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(x) for x in r[1:]])

    @classmethod
    def read_csv(cls, path) -> "LossLog":
        with open(path) as f:
            rows = list(csv.reader(f))[1:]
        return cls([[int(r[0])] + [float(x) for x in r[1:]] for r in rows])


def check_finite(step: int, loss: torch.Tensor, params: torch.Tensor):
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at step {step}")
    if not torch.all(torch.isfinite(params)):
        raise NonFiniteError(f"non-finite parameters at step {step}")


# -- plain coordinate-net fitting -------------------------------------------------

def fit_sdf(mesh: TriMesh, spec: sdf_net.MlpSpec, steps: int, sampling: SamplingConfig | None = None,
            losses: LossConfig | None = None, optim: OptimConfig | None = None, seed: int = 0,
            init: sdf_net.ParamVector | None = None, init_radius: float = 0.5, dtype: str = "float32",
            callback=None):
    """Fit a coordinate-only SDF net to the surface of mesh with the
    three-term loss. Returns (ParamVector, LossLog)."""
    sampling = sampling or SamplingConfig()
    losses = losses or LossConfig()
    optim = optim or OptimConfig()
    if spec.n_features:
        raise ValueError("fit_sdf takes coordinate-only networks")
    dt = DTYPES[dtype]
    rng = np.random.default_rng(seed)
    params = (init or sdf_net.geometric_init(spec, init_radius, seed)).values.to(dt)
    state = OptimizerState.create(params, optim)
    bbox = np.array([[-sampling.extent] * 3, [sampling.extent] * 3])
    counts = (sampling.n_surface, sampling.n_near, sampling.n_uniform)
    log_ = LossLog()
    for step in range(steps):
        batch = sample_batch(mesh, counts, sampling.sigma, bbox, rng)
        p = params.detach().requires_grad_(True)
        total, parts = sdf_losses(p, spec, torch.as_tensor(batch.surface_points, dtype=dt),
                                  torch.as_tensor(batch.surface_normals, dtype=dt),
                                  torch.as_tensor(batch.domain_points, dtype=dt), losses)
        (g,) = torch.autograd.grad(total, p)
        lr = state.current_lr()
        params, state = adam_step(state, params, g)
        check_finite(step, total, params)
        log_.append(step, [x.item() for x in parts], total.item(), lr)
        if callback is not None:
            callback(step, params, log_)
    return sdf_net.ParamVector(spec, params.detach().to(torch.float64)), log_


def sdf_field(params: sdf_net.ParamVector, chunk: int = 65536, dtype=torch.float32):
    """Callable (N, 3) -> (N,) numpy values for coordinate-only networks."""
    vals = params.values.to(dtype)

    def f(x):
        out = []
        with torch.no_grad():
            for s in range(0, len(x), chunk):
                out.append(sdf_net.forward(vals, params.spec, torch.as_tensor(x[s:s + chunk], dtype=dtype)).double().numpy())
        return np.concatenate(out)

    return f
