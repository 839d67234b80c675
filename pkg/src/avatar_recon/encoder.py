"""Normal images, the strided convolutional encoder and pixel-aligned lookup.

Continuous pixel coordinates put texel (row i, column j) at (u, v) = (j, i).
A stride-2 3x3 convolution with padding 1 centres output texel k on input
texel 2k, so a feature map with downsample factor f is sampled at uv / f.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .sdf_net import split_layers


@dataclass
class NormalImage:
    normals: np.ndarray  # (H, W, 3), image convention
    mask: np.ndarray  # (H, W) bool
    side: str = "front"

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[2] != 3 or self.mask.shape != self.normals.shape[:2]:
            raise ValueError("normal image must be HxWx3 with an HxW mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.normals.shape[:2]

    def save_png(self, path):
        """16-bit RGBA PNG: c = round((n + 1) / 2 * 65535), alpha = mask."""
        n = np.where(self.mask[..., None], self.normals, 0.0)
        code = np.round((np.clip(n, -1, 1) + 1) / 2 * 65535).astype(np.uint16)
        alpha = np.where(self.mask, 65535, 0).astype(np.uint16)
        bgra = np.dstack([code[..., 2], code[..., 1], code[..., 0], alpha])
        if not cv2.imwrite(str(path), bgra):
            raise OSError(f"could not write {path}")

    @classmethod
    def load_png(cls, path, side: str = "front") -> "NormalImage":
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"could not read {path}")
        if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 4:
            raise ValueError(f"{path}: expected a 16-bit RGBA normal map")
        rgb = img[..., [2, 1, 0]].astype(np.float64)
        mask = img[..., 3] >= 32768
        normals = np.where(mask[..., None], rgb / 65535 * 2 - 1, 0.0)
        return cls(normals, mask, side)


@dataclass
class FeatureMap:
    data: torch.Tensor  # (C, H', W')
    factor: int = 1

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple = (3, 16, 32, 64, 64)
    stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @property
    def factor(self) -> int:
        return self.stride ** (len(self.channels) - 1)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def layout(self):
        out, off = [], 0
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            w = slice(off, off + cout * cin * 9)
            off += cout * cin * 9
            b = slice(off, off + cout)
            off += cout
            out.append((w, (cout, cin, 3, 3), b))
        return out

    @property
    def n_params(self) -> int:
        return sum(co * ci * 9 + co for ci, co in zip(self.channels[:-1], self.channels[1:]))

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        for _ in range(len(self.channels) - 1):
            h, w = (h - 1) // self.stride + 1, (w - 1) // self.stride + 1
        return h, w

    def to_json(self) -> dict:
        return {"channels": list(self.channels), "stride": self.stride}

    @classmethod
    def from_json(cls, d: dict) -> "EncoderSpec":
        return cls(tuple(d["channels"]), d.get("stride", 2))


def init_encoder(spec: EncoderSpec, seed: int = 0, zero: bool = False) -> torch.Tensor:
    vals = torch.zeros(spec.n_params, dtype=torch.float64)
    if zero:
        return vals
    gen = torch.Generator().manual_seed(int(seed))
    for w, shape, b in spec.layout():
        fan_in = shape[1] * 9
        vals[w] = (torch.randn(shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)).reshape(-1)
    return vals


def image_tensor(image: NormalImage, dtype=torch.float64) -> torch.Tensor:
    n = np.where(image.mask[..., None], image.normals, 0.0)
    return torch.from_numpy(np.ascontiguousarray(n.transpose(2, 0, 1))).to(dtype)


def encode(image: NormalImage | torch.Tensor, params: torch.Tensor, spec: EncoderSpec = EncoderSpec()) -> FeatureMap:
    """Strided 3x3 convolutions with softplus between layers; the last layer is linear."""
    x = image_tensor(image, params.dtype) if isinstance(image, NormalImage) else image
    if x.shape[0] != spec.channels[0]:
        raise ValueError(f"image has {x.shape[0]} channels, encoder expects {spec.channels[0]}")
    if params.numel() != spec.n_params:
        raise ValueError(f"encoder has {params.numel()} parameters, spec needs {spec.n_params}")
    h = x.unsqueeze(0).to(params.dtype)
    layers = split_layers(params, spec.layout())
    for l, (W, bias) in enumerate(layers):
        h = F.conv2d(h, W, bias, stride=spec.stride, padding=1)
        if l < len(layers) - 1:
            h = F.softplus(h)
    return FeatureMap(h[0], spec.factor)


def bilinear(grid: torch.Tensor, uv) -> torch.Tensor:
    """Sample a (C, H, W) grid at continuous texel coordinates uv (N, 2),
    clamping to the border. Returns (N, C)."""
    uv = torch.as_tensor(uv, dtype=grid.dtype)
    C, H, W = grid.shape
    x = uv[:, 0].clamp(0, W - 1)
    y = uv[:, 1].clamp(0, H - 1)
    x0 = torch.floor(x).clamp(max=max(W - 2, 0)).long()
    y0 = torch.floor(y).clamp(max=max(H - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    g = grid.permute(1, 2, 0)
    top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
    bot = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def pixel_feature(fmap: FeatureMap, uv) -> torch.Tensor:
    """Bilinear feature lookup at source-image pixel coordinates."""
    uv = torch.as_tensor(uv, dtype=fmap.data.dtype)
    return bilinear(fmap.data, uv.reshape(-1, 2) / fmap.factor)


def pixel_normal(image: NormalImage, uv) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear normal lookup on a NormalImage. Returns the interpolated
    (un-normalised) image-convention normals and a validity weight in [0, 1]
    (the interpolated mask); background texels contribute zero normals."""
    grid = torch.from_numpy(np.dstack([np.where(image.mask[..., None], image.normals, 0.0),
                                       image.mask.astype(np.float64)]).transpose(2, 0, 1).copy())
    out = bilinear(grid, np.asarray(uv, dtype=np.float64).reshape(-1, 2)).numpy()
    return out[:, :3], out[:, 3]
