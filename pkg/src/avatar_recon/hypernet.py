"""Hyper-network that maps a body mesh to the parameters of an SDF net G.

Per-vertex (position, normal) rows go through a point-wise MLP with the raw
rows concatenated back in at selected layers, are max-pooled to a global
latent, and one decoder head per G layer emits that layer's weights and bias.
Each head's output bias starts at the geometric initialisation of G, so an
untrained hyper-network already produces a sphere SDF.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import sdf_net
from .config import HypernetConfig
from .meshing import TriMesh
from .training import DTYPES, LossLog, OptimizerState, adam_step, check_finite, sample_batch, sdf_losses

log = logging.getLogger(__name__)


def g_spec_for(hidden) -> sdf_net.MlpSpec:
    """Coordinate-only G on raw xyz."""
    return sdf_net.MlpSpec(widths=(3, *hidden, 1), n_freqs=0)


@dataclass(frozen=True)
class HyperNetSpec:
    g_spec: sdf_net.MlpSpec
    encoder_widths: tuple = (6, 256, 256, 256, 256, 256)
    encoder_skips: tuple = (2, 3, 4)
    decoder_hidden: tuple = (256, 256, 256)

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "encoder_skips", tuple(int(s) for s in self.encoder_skips))
        object.__setattr__(self, "decoder_hidden", tuple(int(w) for w in self.decoder_hidden))
        if self.encoder_widths[0] != 6:
            raise ValueError("the encoder consumes 6-vectors (position, normal)")
        if any(not 0 < s < len(self.encoder_widths) - 1 for s in self.encoder_skips):
            raise ValueError(f"encoder skips {self.encoder_skips} out of range")

    @property
    def latent(self) -> int:
        return self.encoder_widths[-1]

    def encoder_shapes(self):
        shapes = []
        for l in range(len(self.encoder_widths) - 1):
            i = self.encoder_widths[l] + (6 if l in self.encoder_skips else 0)
            shapes.append((self.encoder_widths[l + 1], i))
        return shapes

    def head_shapes(self, block: int):
        dims = (self.latent, *self.decoder_hidden, block)
        return [(o, i) for i, o in zip(dims[:-1], dims[1:])]

    def g_blocks(self) -> list[int]:
        """Parameter count of each G layer (weights then bias)."""
        return [o * i + o for o, i in self.g_spec.layer_shapes()]

    def layout(self):
        """{'encoder': [(w, shape, b)], 'heads': [[(w, shape, b)] per G layer]}."""
        off = 0

        def take(shapes):
            nonlocal off
            out = []
            for o, i in shapes:
                w = slice(off, off + o * i)
                off += o * i
                b = slice(off, off + o)
                off += o
                out.append((w, (o, i), b))
            return out

        enc = take(self.encoder_shapes())
        heads = [take(self.head_shapes(n)) for n in self.g_blocks()]
        return {"encoder": enc, "heads": heads, "n_params": off}

    @property
    def n_params(self) -> int:
        return self.layout()["n_params"]

    def to_json(self) -> dict:
        return {"g_spec": self.g_spec.to_json(), "encoder_widths": list(self.encoder_widths),
                "encoder_skips": list(self.encoder_skips), "decoder_hidden": list(self.decoder_hidden)}

    @classmethod
    def from_json(cls, d: dict) -> "HyperNetSpec":
        return cls(sdf_net.MlpSpec.from_json(d["g_spec"]), tuple(d["encoder_widths"]),
                   tuple(d["encoder_skips"]), tuple(d["decoder_hidden"]))

    @classmethod
    def from_config(cls, cfg: HypernetConfig) -> "HyperNetSpec":
        return cls(g_spec_for(cfg.g_hidden), tuple(cfg.encoder_widths), tuple(cfg.encoder_skips),
                   tuple(cfg.decoder_hidden))


def init_hypernet(spec: HyperNetSpec, seed: int = 0, init_radius: float = 0.5,
                  head_scale: float = 1e-2) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    lay = spec.layout()
    vals = torch.zeros(lay["n_params"], dtype=torch.float64)
    for w, (o, i), b in lay["encoder"]:
        vals[w] = (torch.randn(o, i, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / i)).reshape(-1)
    g0 = sdf_net.geometric_init(spec.g_spec, init_radius, seed).values
    off = 0
    for head, n in zip(lay["heads"], spec.g_blocks()):
        for k, (w, (o, i), b) in enumerate(head):
            scale = math.sqrt(2.0 / i) if k < len(head) - 1 else head_scale / math.sqrt(i)
            vals[w] = (torch.randn(o, i, generator=gen, dtype=torch.float64) * scale).reshape(-1)
        vals[head[-1][2]] = g0[off:off + n]
        off += n
    return vals


def mesh_rows(mesh: TriMesh) -> np.ndarray:
    """(V, 6) rows of vertex position and area-weighted vertex normal over
    vertices referenced by a face."""
    used = np.unique(mesh.faces)
    return np.concatenate([mesh.vertices, mesh.vertex_normals()], 1)[used]


def _encode(layers, spec: HyperNetSpec, rows, dtype) -> torch.Tensor:
    x0 = torch.as_tensor(rows, dtype=dtype)
    if x0.ndim != 2 or x0.shape[1] != 6 or len(x0) == 0:
        raise ValueError("hyper-network input must be a non-empty (V, 6) array")
    h = x0
    for l, (W, b) in enumerate(layers):
        if l in spec.encoder_skips:
            h = torch.cat([h, x0], 1)
        h = F.linear(h, W, b)
        if l < len(layers) - 1:
            h = F.relu(h)
    return h.max(0).values


def hypernet_forward(phi: torch.Tensor, spec: HyperNetSpec, template) -> torch.Tensor:
    """Flat G parameter vector for a mesh (TriMesh or precomputed (V, 6) rows)."""
    if phi.numel() != spec.n_params:
        raise ValueError(f"hyper-network has {phi.numel()} parameters, spec needs {spec.n_params}")
    rows = mesh_rows(template) if isinstance(template, TriMesh) else template
    lay = spec.layout()
    flat = lay["encoder"] + [layer for head in lay["heads"] for layer in head]
    layers = sdf_net.split_layers(phi, flat)
    n_enc = len(lay["encoder"])
    z = _encode(layers[:n_enc], spec, rows, phi.dtype)
    out = []
    pos = n_enc
    for head in lay["heads"]:
        h = z
        for k, (W, b) in enumerate(layers[pos:pos + len(head)]):
            h = F.linear(h, W, b)
            if k < len(head) - 1:
                h = F.relu(h)
        pos += len(head)
        out.append(h)
    return torch.cat(out)


def generated_params(phi, spec: HyperNetSpec, template) -> sdf_net.ParamVector:
    with torch.no_grad():
        return sdf_net.ParamVector(spec.g_spec, hypernet_forward(phi, spec, template).to(torch.float64))


def train_hypernet(meshes: list[TriMesh], cfg: HypernetConfig, seed: int = 0, spec: HyperNetSpec | None = None,
                   phi: torch.Tensor | None = None, callback=None) -> tuple[torch.Tensor, HyperNetSpec, LossLog]:
    """Fit the hyper-network so that G(.; H(M)) reproduces each body mesh M."""
    if len(meshes) < 2:
        raise ValueError("hyper-network training needs at least two meshes")
    spec = spec or HyperNetSpec.from_config(cfg)
    dt = DTYPES[cfg.dtype]
    params = (phi if phi is not None else init_hypernet(spec, seed, cfg.init_radius, cfg.head_scale)).to(dt)
    state = OptimizerState.create(params, cfg.optim)
    rng = np.random.default_rng(seed)
    s = cfg.sampling
    bbox = np.array([[-s.extent] * 3, [s.extent] * 3])
    rows = [torch.as_tensor(mesh_rows(m), dtype=dt) for m in meshes]
    log_ = LossLog()
    for step in range(cfg.steps):
        k = int(rng.integers(len(meshes)))
        batch = sample_batch(meshes[k], (s.n_surface, s.n_near, s.n_uniform), s.sigma, bbox, rng)
        p = params.detach().requires_grad_(True)
        g = hypernet_forward(p, spec, rows[k])
        total, parts = sdf_losses(g, spec.g_spec, torch.as_tensor(batch.surface_points, dtype=dt),
                                  torch.as_tensor(batch.surface_normals, dtype=dt),
                                  torch.as_tensor(batch.domain_points, dtype=dt), cfg.losses)
        (grad,) = torch.autograd.grad(total, p)
        lr = state.current_lr()
        params, state = adam_step(state, params, grad)
        check_finite(step, total, params)
        log_.append(step, [x.item() for x in parts], total.item(), lr)
        if callback is not None:
            callback(step, params, log_)
    return params.detach().to(torch.float64), spec, log_


def save_hypernet(path, phi: torch.Tensor, spec: HyperNetSpec, meta: dict | None = None):
    sdf_net.save_checkpoint(path, {"hypernet": (spec.to_json(), phi)}, meta)


def load_hypernet(path) -> tuple[torch.Tensor, HyperNetSpec]:
    blocks, _ = sdf_net.load_checkpoint(path)
    if "hypernet" not in blocks:
        raise ValueError(f"{path} is not a hyper-network checkpoint")
    spec_json, arr = blocks["hypernet"]
    return torch.from_numpy(arr), HyperNetSpec.from_json(spec_json)
