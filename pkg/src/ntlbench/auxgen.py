"""Image perturbation ops and auxiliary-domain builders for source-only NTL.

All ops take a batch ``(N, C, H, W)`` in ``[0, 1]`` plus a magnitude in ``[0, 1]``
and return a batch of the same shape, clipped back to ``[0, 1]``. Magnitude 0 is
the identity for every op. Internal scaling per op:

    gaussian_noise   additive N(0, (0.3 m)^2) pixel noise
    gaussian_blur    Gaussian kernel with sigma = 2 m pixels
    solarize         pixels above 1 - m are inverted
    sharpness        x + 2 m (x - blur(x)), blur sigma 1
    color_invert     (1 - m) x + m (1 - x)
    rotation         angle drawn uniformly from [-90 m, 90 m] degrees per image
    contrast         per-image mean + (1 - 0.8 m)(x - mean)
"""
from __future__ import annotations

import math
from typing import Callable, Literal

import torch
import torch.nn.functional as F
from pydantic import Field, field_validator

from .core import FrozenModel, LabeledDataset

OpName = Literal["gaussian_noise", "gaussian_blur", "solarize", "sharpness",
                 "color_invert", "rotation", "contrast"]
Augmentation = Callable[[torch.Tensor, torch.Generator], torch.Tensor]


def _gaussian_kernel(sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-xs ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    k = _gaussian_kernel(sigma).to(x.dtype)
    c = x.shape[1]
    r = len(k) // 2
    kx = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), kx, groups=c)
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), ky, groups=c)


def rotate(x: torch.Tensor, degrees: torch.Tensor | float, fill: float | None = None) -> torch.Tensor:
    """Counter-clockwise rotation about the image centre, bilinear.

    Exact multiples of 90 degrees on a scalar angle use ``torch.rot90`` so that
    composition is pixel-exact. ``fill=None`` fills with each image's border mean.
    """
    if not torch.is_tensor(degrees):
        deg = float(degrees)
        if deg % 90 == 0:
            return torch.rot90(x, k=int(deg // 90) % 4, dims=(2, 3))
        degrees = torch.full((len(x),), deg)
    theta = degrees.to(x.dtype) * math.pi / 180
    cos, sin = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(cos)
    # grid_sample maps output coords to input coords: inverse rotation
    mat = torch.stack([torch.stack([cos, -sin, zeros], -1),
                       torch.stack([sin, cos, zeros], -1)], 1)
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    if fill is None:
        border = torch.cat([x[..., 0, :], x[..., -1, :], x[..., :, 0], x[..., :, -1]], -1)
        bg = border.mean(-1)[..., None, None]
    else:
        bg = torch.full_like(x[..., :1, :1], fill)
    out = F.grid_sample(x - bg, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out + bg


def apply_op(name: str, x: torch.Tensor, magnitude: float, generator: torch.Generator | None = None) -> torch.Tensor:
    m = float(magnitude)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"magnitude {m} outside [0, 1]")
    if m == 0.0:
        return x.clone()
    if name == "gaussian_noise":
        out = x + 0.3 * m * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    elif name == "gaussian_blur":
        out = blur(x, 2.0 * m)
    elif name == "solarize":
        out = torch.where(x > 1.0 - m, 1.0 - x, x)
    elif name == "sharpness":
        out = x + 2.0 * m * (x - blur(x, 1.0))
    elif name == "color_invert":
        out = (1.0 - m) * x + m * (1.0 - x)
    elif name == "rotation":
        u = torch.rand(len(x), generator=generator, dtype=x.dtype)
        out = rotate(x, (2 * u - 1) * 90.0 * m)
    elif name == "contrast":
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        out = mean + (1.0 - 0.8 * m) * (x - mean)
    else:
        raise ValueError(f"unknown augmentation op {name!r}")
    return out.clamp(0.0, 1.0)


class AugmentationSpec(FrozenModel):
    ops: list[OpName] = Field(default_factory=lambda: ["gaussian_blur", "solarize", "sharpness",
                                                       "color_invert", "contrast"])
    magnitude: float = Field(0.5, ge=0.0, le=1.0)
    ops_per_sample: int = Field(2, gt=0)

    @field_validator("ops")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("ops must be nonempty")
        return v


def strong_augment(batch: torch.Tensor, spec: AugmentationSpec, seed: int) -> torch.Tensor:
    """Apply ``ops_per_sample`` randomly chosen ops to every image."""
    for op in spec.ops:
        if op not in OpName.__args__:
            raise ValueError(f"unknown augmentation op {op!r}")
    g = torch.Generator().manual_seed(seed)
    out = batch.clone()
    n_ops = len(spec.ops)
    choice = torch.randint(n_ops, (len(batch), spec.ops_per_sample), generator=g)
    for slot in range(spec.ops_per_sample):
        for k, op in enumerate(spec.ops):
            rows = (choice[:, slot] == k).nonzero().flatten()
            if len(rows):
                out[rows] = apply_op(op, out[rows], spec.magnitude, g)
    return out


def make_cuti_style_batch(source_batch: torch.Tensor, noise_std: float,
                          generator: torch.Generator | None = None, eps: float = 1e-6,
                          return_stats: bool = False):
    """Re-style images by noising their per-channel mean and std (AdaIN on pixels).

    Each channel is normalized with its own spatial statistics, then rescaled
    with ``(mu + n_mu, sigma * exp(n_sigma))``, noise drawn from N(0, noise_std^2).
    The result is clipped to the input's value range.
    """
    if len(source_batch) == 0:
        raise ValueError("empty batch")
    n, c = source_batch.shape[:2]
    flat = source_batch.reshape(n, c, -1)
    mu = flat.mean(-1, keepdim=True)
    sigma = flat.std(-1, unbiased=False, keepdim=True).clamp_min(eps)
    shape = (n, c, 1)
    n_mu = noise_std * torch.randn(shape, generator=generator, dtype=flat.dtype)
    n_sigma = noise_std * torch.randn(shape, generator=generator, dtype=flat.dtype)
    new_mu, new_sigma = mu + n_mu, sigma * torch.exp(n_sigma)
    styled = ((flat - mu) / sigma * new_sigma + new_mu).reshape(source_batch.shape)
    out = styled.clamp(float(source_batch.min()), float(source_batch.max()))
    if return_stats:
        return out, styled, new_mu.squeeze(-1), new_sigma.squeeze(-1)
    return out


def build_auxiliary_domain(source: LabeledDataset, strategy: Literal["strong_augment", "cuti_style"],
                           params: dict | AugmentationSpec | None = None, seed: int = 0) -> LabeledDataset:
    """A labelled stand-in target domain synthesized from source images only."""
    params = params or {}
    images = source._images
    if strategy == "strong_augment":
        spec = params if isinstance(params, AugmentationSpec) else AugmentationSpec(**params)
        out = strong_augment(images, spec, seed)
        desc = f"strong_augment {spec.model_dump()}"
    elif strategy == "cuti_style":
        std = float(params.get("noise_std", 0.5)) if isinstance(params, dict) else 0.5
        g = torch.Generator().manual_seed(seed)
        out = make_cuti_style_batch(images, std, g)
        desc = f"cuti_style noise_std={std}"
    else:
        raise ValueError(f"unknown auxiliary strategy {strategy!r}")
    return source.with_images(out, name=f"{source.name}+aux", role="auxiliary",
                              meta={"provenance": "auxiliary", "aux_desc": desc})


class _Perturbation:
    def __init__(self, op: str, magnitude: float):
        self.op = op
        self.magnitude = magnitude

    def __call__(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        return apply_op(self.op, x, self.magnitude, generator)

    def __repr__(self):
        return f"{self.op}@{self.magnitude:g}"


TRANSNTL_OPS = ("gaussian_noise", "gaussian_blur", "contrast", "rotation")


def perturbation_set(kind: Literal["transntl_default"] = "transntl_default",
                     magnitude: float = 0.2) -> list[_Perturbation]:
    """The fixed perturbation family shared by the TransNTL attack and its defense."""
    if kind != "transntl_default":
        raise ValueError(f"unknown perturbation set {kind!r}")
    if not 0.0 < magnitude <= 1.0:
        raise ValueError("magnitude must be in (0, 1]")
    return [_Perturbation(op, magnitude) for op in TRANSNTL_OPS]


def identity_perturbation() -> _Perturbation:
    return _Perturbation("contrast", 0.0)
