"""Coordinate MLPs over flat parameter vectors.

Networks are plain functions of a flat parameter tensor so the same code
evaluates trained parameters and parameters emitted by the hyper-network.
Input rows are laid out as ``[features | xyz]``; xyz is positionally encoded
inside the network and all input gradients are taken with respect to raw xyz.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"CARW"
FORMAT_VERSION = 1


def posenc_dim(n_freqs: int, include_input: bool = True) -> int:
    return (3 if include_input else 0) + 6 * n_freqs


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input dim of every layer, then 1
    skip_in: tuple = ()
    activation: str = "softplus"
    beta: float = 100.0
    n_features: int = 0
    n_freqs: int = 0
    include_input: bool = True
    freq_scale: float = 1.0  # band k is sin/cos(freq_scale 2^k x)
    skip_mode: str = "concat"
    sine_omega: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "skip_in", tuple(int(s) for s in self.skip_in))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad widths {self.widths}")
        if self.widths[-1] != 1:
            raise ValueError("last width must be 1")
        if self.widths[0] != self.n_features + posenc_dim(self.n_freqs, self.include_input):
            raise ValueError(f"first width {self.widths[0]} != features {self.n_features} + "
                             f"encoded xyz {posenc_dim(self.n_freqs, self.include_input)}")
        if any(not 0 < s < self.n_layers for s in self.skip_in):
            raise ValueError(f"skip indices {self.skip_in} out of range for {self.n_layers} layers")
        if self.activation not in ("softplus", "sine"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.skip_mode not in ("concat", "add"):
            raise ValueError(f"unknown skip mode {self.skip_mode!r}")
        if self.skip_mode == "concat":
            for s in self.skip_in:
                if self.widths[s] <= self.widths[0]:
                    raise ValueError(f"skip layer {s} too narrow to hold the concatenated input")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.n_features + 3

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every linear layer."""
        shapes = []
        for l in range(self.n_layers):
            out = self.widths[l + 1]
            if l + 1 in self.skip_in and self.skip_mode == "concat":
                out -= self.widths[0]
            shapes.append((out, self.widths[l]))
        return shapes

    def layout(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """Index map: per layer the weight slice, weight shape and bias slice."""
        out, off = [], 0
        for o, i in self.layer_shapes():
            w = slice(off, off + o * i)
            off += o * i
            b = slice(off, off + o)
            off += o
            out.append((w, (o, i), b))
        return out

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["skip_in"] = list(self.skip_in)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MlpSpec":
        return cls(**d)


def coordinate_spec(hidden=(256, 256, 256, 256), n_features=0, n_freqs=6, skip_in=(), **kw) -> MlpSpec:
    """Spec builder where ``hidden`` lists hidden layer widths as seen by the
    following layer (skip layers include the concatenated input)."""
    d0 = n_features + posenc_dim(n_freqs)
    return MlpSpec(widths=(d0, *hidden, 1), skip_in=tuple(skip_in), n_features=n_features, n_freqs=n_freqs, **kw)


@dataclass
class ParamVector:
    spec: MlpSpec
    values: torch.Tensor

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            self.values = torch.as_tensor(np.asarray(self.values), dtype=torch.float64)
        if self.values.ndim != 1 or self.values.numel() != self.spec.n_params:
            raise ValueError(f"parameter vector has {self.values.numel()} entries, spec needs {self.spec.n_params}")

    def layers(self):
        for w, shape, b in self.spec.layout():
            yield self.values[w].view(shape), self.values[b]

    def clone(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.detach().clone())


def _values(params) -> torch.Tensor:
    return params.values if isinstance(params, ParamVector) else params


def split_layers(vals: torch.Tensor, layout) -> list:
    """(weight, bias) views for a contiguous layout, split in one op so that
    backward does not materialise a full-size gradient per slice."""
    sizes = []
    for w, shape, b in layout:
        sizes += [w.stop - w.start, b.stop - b.start]
    start, total = layout[0][0].start, sum(sizes)
    if start or total != vals.numel():
        vals = vals[start:start + total]
    pieces = torch.split(vals, sizes)
    return [(pieces[2 * k].view(shape), pieces[2 * k + 1]) for k, (_, shape, _) in enumerate(layout)]


def posenc(x, n_freqs: int, include_input: bool = True, freq_scale: float = 1.0):
    """[x, sin(s x), cos(s x), ..., sin(s 2^(L-1) x), cos(...)] with s = freq_scale.

    With s = 1 the lowest band is injective on |x| < pi/2, so sampling boxes up
    to about 1.5 do not alias (s = pi would fold x onto x +- 2).
    """
    is_np = not torch.is_tensor(x)
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if is_np else x
    parts = [t] if include_input else []
    for k in range(n_freqs):
        a = (freq_scale * 2.0 ** k) * t
        parts += [torch.sin(a), torch.cos(a)]
    out = torch.cat(parts, dim=-1)
    return out.numpy() if is_np else out


def _activation(spec: MlpSpec, z):
    if spec.activation == "softplus":
        return F.softplus(z, beta=spec.beta)
    return torch.sin(spec.sine_omega * z)


def forward(params, spec: MlpSpec, inputs) -> torch.Tensor:
    """Evaluate the network on rows ``[features | xyz]``; returns shape (N,)."""
    vals = _values(params)
    x = torch.as_tensor(inputs, dtype=vals.dtype)
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"input has {x.shape[-1]} columns, spec expects {spec.in_dim}")
    squeeze = x.ndim == 1
    x = x.reshape(-1, spec.in_dim)
    feats, xyz = x[:, :spec.n_features], x[:, spec.n_features:]
    z0 = torch.cat([feats, posenc(xyz, spec.n_freqs, spec.include_input, spec.freq_scale)], dim=-1)
    h = z0
    n = spec.n_layers
    for l, (W, bias) in enumerate(split_layers(vals, spec.layout())):
        if l in spec.skip_in:
            if spec.skip_mode == "concat":
                h = torch.cat([h, z0], dim=-1) / math.sqrt(2.0)
            else:
                h = h + F.pad(z0, (0, h.shape[-1] - z0.shape[-1]))
        h = F.linear(h, W, bias)
        if l < n - 1:
            h = _activation(spec, h)
    out = h[:, 0]
    return out[0] if squeeze else out


def value_and_grad(params, spec: MlpSpec, inputs, create_graph: bool = False):
    """Values (N,) and gradients w.r.t. raw xyz (N, 3)."""
    vals = _values(params)
    x = torch.as_tensor(inputs, dtype=vals.dtype).reshape(-1, spec.in_dim)
    feats = x[:, :spec.n_features]
    xyz = x[:, spec.n_features:].detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = forward(vals, spec, torch.cat([feats, xyz], dim=-1))
        (g,) = torch.autograd.grad(y.sum(), xyz, create_graph=create_graph)
    return y, g


def grad_input(params, spec: MlpSpec, inputs) -> torch.Tensor:
    return value_and_grad(params, spec, inputs)[1]


def grad_params(params, spec: MlpSpec, inputs, value_adjoint, grad_adjoint=None) -> torch.Tensor:
    """Exact gradient of sum_i a_i F_i + sum_i b_i . grad_x F_i w.r.t. the
    parameters, i.e. the parameter gradient of any loss whose per-sample
    adjoints for the value and input-gradient heads are a and b."""
    vals = _values(params).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        # keep the graph: the value path is differentiated a second time below
        y, g = value_and_grad(vals, spec, inputs, create_graph=True)
        s = (torch.as_tensor(value_adjoint, dtype=vals.dtype).reshape(-1) * y).sum()
        if grad_adjoint is not None:
            s = s + (torch.as_tensor(grad_adjoint, dtype=vals.dtype).reshape(-1, 3) * g).sum()
        (out,) = torch.autograd.grad(s, vals, allow_unused=True)
    return torch.zeros_like(vals) if out is None else out


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], 1)


def geometric_init(spec: MlpSpec, radius: float = 1.0, seed: int = 0, mix: float = 0.3) -> ParamVector:
    """Sphere-SDF initialisation: the untrained net approximates |x| - radius.

    Weights on feature columns and on encoded (non-raw) xyz columns start at
    zero so the initial surface depends on raw xyz only. First-layer rows are
    spread evenly over the sphere; hidden layers are a feature-preserving fold
    plus ``mix`` times a random orthogonal matrix; the output layer is then
    fitted so that the net matches |x| - radius on three shells around the
    sphere.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if spec.activation == "sine":
        return _sine_init(spec, seed)
    gen = torch.Generator().manual_seed(int(seed))
    vals = torch.zeros(spec.n_params, dtype=torch.float64)
    layout = spec.layout()
    raw0 = spec.n_features
    for l, (w, (o, i), b) in enumerate(layout[:-1]):
        W = torch.zeros(o, i, dtype=torch.float64)
        if l == 0:
            if spec.include_input:
                dirs = torch.from_numpy(fibonacci_sphere(o))[torch.randperm(o, generator=gen)]
                W[:, raw0:raw0 + 3] = dirs * math.sqrt(6.0 / o)
        else:
            skip = l in spec.skip_in and spec.skip_mode == "concat"
            kh = i - spec.widths[0] if skip else i
            cols = torch.zeros(i, dtype=torch.bool)
            cols[:kh] = True
            if skip and spec.include_input:
                cols[kh + raw0:kh + raw0 + 3] = True
            Q = torch.empty(o, int(cols.sum()), dtype=torch.float64)
            torch.nn.init.orthogonal_(Q, generator=gen)
            W[:, cols] = mix * Q
            idx = torch.arange(kh)
            W[(idx * o) // kh if kh > o else idx, idx] += 1.0
        vals[w] = W.reshape(-1)
    w, (o, i), b = layout[-1]
    vals[w] = 1.0
    if spec.include_input:
        pts = np.concatenate([fibonacci_sphere(512) * s * radius for s in (0.5, 1.0, 1.5)])
        y = forward(vals, spec, np.concatenate([np.zeros((len(pts), spec.n_features)), pts], 1)).numpy()
        A = np.stack([y, np.ones_like(y)], 1)
        (a, c), *_ = np.linalg.lstsq(A, np.linalg.norm(pts, axis=1), rcond=None)
        vals[w] *= float(a)
        vals[b] = float(c) - radius
    else:
        vals[b] = -radius
    return ParamVector(spec, vals)


def _sine_init(spec: MlpSpec, seed: int) -> ParamVector:
    gen = torch.Generator().manual_seed(int(seed))
    vals = torch.zeros(spec.n_params, dtype=torch.float64)
    for l, (w, (o, i), b) in enumerate(spec.layout()):
        bound = 1.0 / i if l == 0 else math.sqrt(6.0 / i) / spec.sine_omega
        vals[w] = ((torch.rand(o, i, generator=gen, dtype=torch.float64) * 2 - 1) * bound).reshape(-1)
    return ParamVector(spec, vals)


def random_init(spec: MlpSpec, seed: int = 0, scale: float = 1.0) -> ParamVector:
    gen = torch.Generator().manual_seed(int(seed))
    vals = torch.zeros(spec.n_params, dtype=torch.float64)
    for w, (o, i), b in spec.layout():
        vals[w] = (torch.randn(o, i, generator=gen, dtype=torch.float64) * scale / math.sqrt(i)).reshape(-1)
        vals[b] = torch.randn(o, generator=gen, dtype=torch.float64) * 0.1 * scale
    return ParamVector(spec, vals)


# -- checkpoint container ---------------------------------------------------

def save_checkpoint(path, blocks: dict, meta: dict | None = None):
    """Write named parameter blocks: magic, u32 version, u32 header length,
    JSON header, then little-endian f64 values of every block in order."""
    header = {"blocks": [], "meta": meta or {}}
    arrays = []
    for name, (spec_json, values) in blocks.items():
        arr = np.ascontiguousarray(_to_numpy(values), dtype="<f8").reshape(-1)
        header["blocks"].append({"name": name, "spec": spec_json, "count": int(arr.size)})
        arrays.append(arr)
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
        f.write(hdr)
        for arr in arrays:
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ({name: (spec_json, np.ndarray)}, meta)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a CARW checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    blocks = {}
    for blk in header["blocks"]:
        n = blk["count"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        blocks[blk["name"]] = (blk["spec"], arr)
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return blocks, header["meta"]


def save_params(path, params: ParamVector, meta: dict | None = None):
    save_checkpoint(path, {"net": (params.spec.to_json(), params.values)}, meta)


def load_params(path, name: str = "net") -> ParamVector:
    blocks, _ = load_checkpoint(path)
    spec_json, arr = blocks[name]
    return ParamVector(MlpSpec.from_json(spec_json), torch.from_numpy(arr))


def _to_numpy(v) -> np.ndarray:
    if isinstance(v, ParamVector):
        v = v.values
    if torch.is_tensor(v):
        return v.detach().cpu().to(torch.float64).numpy()
    return np.asarray(v, dtype=np.float64)
