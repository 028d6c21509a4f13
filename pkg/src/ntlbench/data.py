"""Desk-scale datasets: synthetic glyphs, IDX digits, controlled shifts, splits and triggers."""
from __future__ import annotations

import gzip
import json
import math
import struct
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from pydantic import Field, model_validator

from . import auxgen
from .core import DomainPair, FrozenModel, LabeledDataset, PairSplits, SplitTriple

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class ShiftSpec(FrozenModel):
    kind: Literal["rotation", "color_invert", "background_texture", "channel_swap", "corruption"]
    magnitude: float = Field(ge=0.0, le=1.0)


class TriggerSpec(FrozenModel):
    pattern: list = Field(default_factory=lambda: checkerboard(4))
    position: str | tuple[int, int] = "bottom_right"
    alpha: float = Field(1.0, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _square(self):
        arr = np.asarray(self.pattern, dtype=float)
        if arr.ndim not in (2, 3) or arr.shape[0] != arr.shape[1]:
            raise ValueError("pattern must be k x k or k x k x channels")
        return self

    def patch(self, channels: int) -> torch.Tensor:
        arr = torch.as_tensor(np.asarray(self.pattern, dtype=np.float32))
        if arr.ndim == 2:
            arr = arr[None].expand(channels, -1, -1)
        else:
            arr = arr.permute(2, 0, 1)
        return arr.contiguous()


def checkerboard(k: int = 4) -> list[list[float]]:
    return [[float((i + j) % 2 == 0) for j in range(k)] for i in range(k)]


# ----------------------------------------------------------------------- loading

# seven-segment layout in a unit box: (x0, y0, x1, y1)
_SEGMENTS = {
    "a": (0.0, 0.0, 1.0, 0.0), "b": (1.0, 0.0, 1.0, 0.5), "c": (1.0, 0.5, 1.0, 1.0),
    "d": (0.0, 1.0, 1.0, 1.0), "e": (0.0, 0.5, 0.0, 1.0), "f": (0.0, 0.0, 0.0, 0.5),
    "g": (0.0, 0.5, 1.0, 0.5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd"]


# max per-glyph rotation in degrees
GLYPH_ROTATION_JITTER = 32.0


def _render_glyph(digit: int, rng: np.random.Generator, size: int) -> np.ndarray:
    ss = 4
    canvas = size * ss
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    w = rng.uniform(0.35, 0.5) * canvas
    h = rng.uniform(0.55, 0.72) * canvas
    slant = rng.uniform(-0.25, 0.25)
    rot = math.radians(rng.uniform(-GLYPH_ROTATION_JITTER, GLYPH_ROTATION_JITTER))
    cx = canvas / 2 + rng.uniform(-0.06, 0.06) * canvas
    cy = canvas / 2 + rng.uniform(-0.06, 0.06) * canvas
    thick = int(rng.uniform(0.07, 0.12) * canvas)
    cr, sr = math.cos(rot), math.sin(rot)

    def tf(u, v):
        x = (u - 0.5) * w + slant * (0.5 - v) * h
        y = (v - 0.5) * h
        return cx + cr * x - sr * y, cy + sr * x + cr * y

    for seg in _DIGITS[digit]:
        x0, y0, x1, y1 = _SEGMENTS[seg]
        jit = rng.uniform(-0.04, 0.04, 4)
        p0 = tf(x0 + jit[0], y0 + jit[1])
        p1 = tf(x1 + jit[2], y1 + jit[3])
        draw.line([p0, p1], fill=255, width=thick)
        r = thick / 2
        for px, py in (p0, p1):
            draw.ellipse([px - r, py - r, px + r, py + r], fill=255)
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _glyph_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random RGB background/foreground with either polarity and luminance gap >= 0.3."""
    lum = np.array([0.299, 0.587, 0.114])
    while True:
        bg, fg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        if abs(lum @ (fg - bg)) >= 0.3:
            return bg.astype(np.float32), fg.astype(np.float32)


def synthesize_glyphs(n: int = 2000, seed: int = 0, image_size: int = 32) -> LabeledDataset:
    """Procedural seven-segment digit glyphs with random geometry and colours.

    Classes are assigned round-robin before shuffling, so every class count is
    within one of ``n / 10``.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, y in enumerate(labels):
        mask = _render_glyph(int(y), rng, image_size)
        bg, fg = _glyph_colors(rng)
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        img += rng.normal(0, 0.08, img.shape).astype(np.float32)
        images[i] = np.clip(img, 0, 1)
    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels), 10,
                          name=f"glyphs(seed={seed})",
                          meta={"base": "synthetic_glyphs", "seed": seed, "shape": [3, image_size, image_size]})


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file (big-endian magic, big-endian int32 dims, uint8 payload)."""
    with _open(Path(path)) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXFormatError("truncated IDX magic number", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(
            f"bad IDX magic 0x{magic:08X}, expected 0x{expected_magic:08X}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXFormatError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end != count:
        raise IDXFormatError(
            f"payload holds {len(raw) - header_end} bytes, header declares {count}", header_end)
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_idx_digits(images_path, labels_path, image_size: int = 32) -> LabeledDataset:
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(imgs) != len(labels):
        raise ValueError("image and label counts differ")
    x = torch.from_numpy(imgs.astype(np.float32) / 255.0)[:, None]
    if x.shape[-1] != image_size:
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    x = x.repeat(1, 3, 1, 1)
    return LabeledDataset(x, torch.from_numpy(labels.astype(np.int64)), 10, name=Path(images_path).name,
                          meta={"base": "digits_idx", "shape": [3, image_size, image_size]})


def load_or_synthesize(base: Literal["digits_idx", "synthetic_glyphs"], path_or_seed,
                       n: int = 2000, image_size: int = 32) -> LabeledDataset:
    if base == "synthetic_glyphs":
        return synthesize_glyphs(n=n, seed=int(path_or_seed), image_size=image_size)
    if base == "digits_idx":
        if isinstance(path_or_seed, (tuple, list)):
            img_p, lab_p = path_or_seed
        else:
            d = Path(path_or_seed)
            img_p = next(iter(sorted(d.glob("*images*idx3*"))), None)
            lab_p = next(iter(sorted(d.glob("*labels*idx1*"))), None)
            if img_p is None or lab_p is None:
                raise FileNotFoundError(f"no IDX image/label files in {d}")
        return load_idx_digits(img_p, lab_p, image_size)
    raise ValueError(f"unknown dataset base {base!r}")


def write_metadata(dataset: LabeledDataset, path: str | Path, shift_desc: str = "") -> dict:
    meta = {
        "name": dataset.name,
        "C": dataset.num_classes,
        "shape": list(dataset.image_shape),
        "shift_desc": shift_desc,
        "checksum": dataset.checksum(),
    }
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


# ------------------------------------------------------------------------ shifts


def apply_shift(images: torch.Tensor, shift: ShiftSpec, seed: int = 0) -> torch.Tensor:
    m = shift.magnitude
    if m == 0:
        return images.clone()
    g = torch.Generator().manual_seed(seed)
    if shift.kind == "rotation":
        return rotate(images, 90.0 * m)
    if shift.kind == "color_invert":
        # each image is fully inverted with probability m
        flip = torch.rand(len(images), generator=g) < m
        out = images.clone()
        out[flip] = 1.0 - images[flip]
        return out
    if shift.kind == "channel_swap":
        swapped = images[:, [2, 0, 1]] if images.shape[1] == 3 else images
        return (1 - m) * images + m * swapped
    if shift.kind == "background_texture":
        h, w = images.shape[-2:]
        freq = torch.randint(2, 6, (2,), generator=g).float()
        yy, xx = torch.meshgrid(torch.linspace(0, 1, h), torch.linspace(0, 1, w), indexing="ij")
        tex = 0.5 + 0.5 * torch.sin(2 * math.pi * (freq[0] * xx + freq[1] * yy))
        # texture mostly shows where the image is dark
        lum = images.mean(1, keepdim=True)
        return (images + m * 0.6 * tex * (1 - lum)).clamp(0, 1)
    if shift.kind == "corruption":
        out = images
        for op in auxgen.TRANSNTL_OPS:
            out = auxgen.apply_op(op, out, m, g)
        return out
    raise ValueError(f"unknown shift {shift.kind!r}")


def rotate(images: torch.Tensor, degrees: float) -> torch.Tensor:
    return auxgen.rotate(images, degrees)


def make_domain_pair(base: LabeledDataset, shift: ShiftSpec | Sequence[ShiftSpec], seed: int = 0) -> DomainPair:
    """Source is ``base``; target is a shifted copy with the same labels.

    A list of shifts is applied left to right.
    """
    shifts = [shift] if isinstance(shift, ShiftSpec) else list(shift)
    x = base._images
    for i, s in enumerate(shifts):
        x = apply_shift(x, s, seed + i)
    desc = " + ".join(f"{s.kind}@{s.magnitude:g}" for s in shifts)
    target = base.with_images(x, name=f"{base.name}|{desc}", role="target", meta={"shift_desc": desc})
    source = base.with_images(base._images.clone(), role="source")
    return DomainPair(source, target, base.num_classes, desc)


def sequential_pairs(domains: Sequence[LabeledDataset]) -> list[DomainPair]:
    if len(domains) < 2:
        raise ValueError("sequential pairing needs at least 2 domains")
    pairs = []
    for a, b in zip(domains[:-1], domains[1:]):
        pairs.append(DomainPair(a.with_images(a._images, role="source"),
                                b.with_images(b._images, role="target"),
                                a.num_classes, f"{a.name} -> {b.name}"))
    return pairs


def split_811(dataset_or_n, seed: int = 0) -> SplitTriple:
    n = dataset_or_n if isinstance(dataset_or_n, int) else len(dataset_or_n)
    if n < 10:
        raise ValueError("split_811 needs at least 10 examples")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    return SplitTriple(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:], seed)


def split_pair(pair: DomainPair, seed: int = 0) -> PairSplits:
    return PairSplits(pair, split_811(pair.source, seed), split_811(pair.target, seed + 1))


# ---------------------------------------------------------------------- triggers


def _trigger_origin(trig: TriggerSpec, h: int, w: int) -> tuple[int, int]:
    k = len(trig.pattern)
    pos = trig.position
    if isinstance(pos, str):
        corners = {"top_left": (0, 0), "top_right": (0, w - k), "bottom_left": (h - k, 0),
                   "bottom_right": (h - k, w - k)}
        if pos not in corners:
            raise ValueError(f"unknown trigger position {pos!r}")
        r, c = corners[pos]
    else:
        r, c = pos
    if r < 0 or c < 0 or r + k > h or c + k > w:
        raise ValueError("trigger patch out of bounds")
    return r, c


def apply_trigger_images(images: torch.Tensor, trig: TriggerSpec) -> torch.Tensor:
    h, w = images.shape[-2:]
    r, c = _trigger_origin(trig, h, w)
    k = len(trig.pattern)
    patch = trig.patch(images.shape[1]).to(images.dtype)
    out = images.clone()
    region = out[:, :, r:r + k, c:c + k]
    out[:, :, r:r + k, c:c + k] = (1 - trig.alpha) * region + trig.alpha * patch
    return out


def apply_trigger(dataset: LabeledDataset, trig: TriggerSpec) -> LabeledDataset:
    return dataset.with_images(apply_trigger_images(dataset._images, trig),
                               name=f"{dataset.name}+trigger", meta={"trigger": trig.model_dump()})


def build_ov_pair(dataset: LabeledDataset, trig: TriggerSpec) -> DomainPair:
    """Ownership verification: clean data is the source, triggered data the target."""
    clean = dataset.with_images(dataset._images.clone(), role="source")
    triggered = apply_trigger(dataset, trig)
    triggered.role = "target"
    return DomainPair(clean, triggered, dataset.num_classes, "ov: target=triggered")


def build_aa_pair(dataset: LabeledDataset, trig: TriggerSpec) -> DomainPair:
    """Applicability authorization: triggered data is the source, clean data the target."""
    ov = build_ov_pair(dataset, trig)
    src = ov.target.with_images(ov.target._images, role="source")
    tgt = ov.source.with_images(ov.source._images, role="target")
    return DomainPair(src, tgt, dataset.num_classes, "aa: source=triggered")
