"""Shared domain types: datasets, model bundles, metrics and run configuration."""
from __future__ import annotations

import copy
import hashlib
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field


class NTLError(Exception):
    """Base class for errors raised by this package."""


class DivergenceError(NTLError):
    """A training loop produced a non-finite loss."""

    def __init__(self, where: str = ""):
        super().__init__(f"divergence detected{': ' + where if where else ''}")


class ProvenanceError(NTLError):
    """A data-provenance guard was violated."""


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# --------------------------------------------------------------------------- data


class LabeledDataset:
    """Images ``(N, C, H, W)`` in ``[0, 1]`` with integer labels.

    Every batch fetch goes through :meth:`take` or :meth:`take_images`, which
    count how many images and labels have been read. Provenance guards in the
    training and attack code are checked against these counters.
    """

    def __init__(
        self,
        images: torch.Tensor,
        labels: torch.Tensor,
        num_classes: int,
        name: str = "dataset",
        role: str = "source",
        meta: dict | None = None,
    ):
        if images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self._images = images.float().contiguous()
        self._labels = labels.long().contiguous()
        self._images.requires_grad_(False)
        self.num_classes = int(num_classes)
        self.name = name
        self.role = role
        self.meta = dict(meta or {})
        self.reads: Counter = Counter()

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self._images.shape[1:])

    def take(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        self.reads["images"] += len(idx)
        self.reads["labels"] += len(idx)
        return self._images[idx], self._labels[idx]

    def take_images(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        self.reads["images"] += len(idx)
        return self._images[idx]

    def label_histogram(self) -> list[int]:
        # metadata query, not a training read
        return torch.bincount(self._labels, minlength=self.num_classes).tolist()

    def with_images(self, images: torch.Tensor, name: str | None = None, role: str | None = None,
                    meta: dict | None = None) -> "LabeledDataset":
        """Same labels, new pixels. Used by shift, trigger and augmentation builders."""
        return LabeledDataset(images, self._labels.clone(), self.num_classes,
                              name=name or self.name, role=role or self.role,
                              meta={**self.meta, **(meta or {})})

    def subset(self, idx, role: str | None = None) -> "LabeledDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledDataset(self._images[idx].clone(), self._labels[idx].clone(), self.num_classes,
                              name=self.name, role=role or self.role, meta=self.meta)

    def unlabeled(self, idx=None) -> "UnlabeledView":
        return UnlabeledView(self, idx)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self._images.numpy().tobytes())
        h.update(self._labels.numpy().tobytes())
        return h.hexdigest()

    def all_indices(self) -> list[int]:
        return list(range(len(self)))


class UnlabeledView:
    """Image-only window onto a dataset. Has no way to reach the labels."""

    def __init__(self, base: LabeledDataset, idx=None):
        self._base = base
        self._idx = torch.arange(len(base)) if idx is None else torch.as_tensor(idx, dtype=torch.long)
        self.num_classes = base.num_classes
        self.role = base.role

    def __len__(self) -> int:
        return len(self._idx)

    def take_images(self, idx) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self._base.take_images(self._idx[idx])


@dataclass(frozen=True)
class DomainPair:
    source: LabeledDataset
    target: LabeledDataset
    num_classes: int
    shift_desc: str = ""

    def __post_init__(self):
        if self.source.image_shape != self.target.image_shape:
            raise ValueError(
                f"image shape mismatch: {self.source.image_shape} vs {self.target.image_shape}")
        for ds in (self.source, self.target):
            hist = ds.label_histogram()
            if len(hist) > self.num_classes:
                raise ValueError("labels outside {0..C-1}")


@dataclass(frozen=True)
class SplitTriple:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int = 0


@dataclass(frozen=True)
class PairSplits:
    """A domain pair together with one split per domain."""

    pair: DomainPair
    source: SplitTriple
    target: SplitTriple


# -------------------------------------------------------------------------- model


class ModelBundle(nn.Module):
    """Feature extractor ``phi`` composed with classifier head ``omega``.

    ``forward`` returns logits; :meth:`probs` applies the softmax stage.
    """

    def __init__(self, phi: nn.Module, omega: nn.Module, arch_spec: dict,
                 aux_domain_head: nn.Module | None = None):
        super().__init__()
        self.phi = phi
        self.omega = omega
        self.aux_domain_head = aux_domain_head
        self.arch_spec = dict(arch_spec)

    @property
    def num_classes(self) -> int:
        return int(self.arch_spec["num_classes"])

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.phi(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.omega(self.phi(x))

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=-1)

    def domain_logits(self, z: torch.Tensor) -> torch.Tensor:
        if self.aux_domain_head is None:
            raise NTLError("no domain head configured")
        return self.aux_domain_head(z)

    def phi_parameters(self):
        return list(self.phi.parameters())

    def omega_parameters(self):
        return list(self.omega.parameters())

    def reset_omega(self, generator: torch.Generator | None = None):
        """Re-draw the head's parameters from the fresh-init distribution."""
        for m in self.omega.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m, generator)

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)


DEFAULT_ARCH = {
    "in_channels": 3,
    "image_size": 32,
    "channels": [32, 64, 128],
    "num_classes": 10,
    "domain_head": False,
}


def _init_linear(m: nn.Linear, generator: torch.Generator | None):
    bound = 1.0 / np.sqrt(m.in_features)
    with torch.no_grad():
        m.weight.uniform_(-bound, bound, generator=generator)
        if m.bias is not None:
            m.bias.uniform_(-bound, bound, generator=generator)


def build_model(arch_spec: dict | None = None, seed: int = 0) -> ModelBundle:
    """Conv blocks (conv -> ReLU -> 2x2 max-pool) as phi, one linear layer as omega."""
    spec = {**DEFAULT_ARCH, **(arch_spec or {})}
    torch.manual_seed(seed)
    layers: list[nn.Module] = []
    c_in = spec["in_channels"]
    size = spec["image_size"]
    for c_out in spec["channels"]:
        layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        c_in = c_out
        size //= 2
    if size < 1:
        raise ValueError("too many downsampling blocks for the image size")
    layers.append(nn.Flatten())
    phi = nn.Sequential(*layers)
    feat_dim = c_in * size * size
    omega = nn.Linear(feat_dim, spec["num_classes"])
    aux = nn.Linear(feat_dim, 2) if spec.get("domain_head") else None
    return ModelBundle(phi, omega, {**spec, "feature_dim": feat_dim}, aux)


def parameter_checksum(params) -> str:
    """sha256 over the raw bytes of a parameter iterable or module."""
    if isinstance(params, nn.Module):
        tensors = [t for _, t in sorted(params.state_dict().items())]
    else:
        tensors = list(params)
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


# ------------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class Metrics:
    SA: float
    TA: float
    OA: float = field(default=float("nan"))

    def __post_init__(self):
        object.__setattr__(self, "OA", overall_score(self.SA, self.TA))

    def as_dict(self) -> dict:
        return {"SA": self.SA, "TA": self.TA, "OA": self.OA}


def overall_score(sa: float, ta: float) -> float:
    for v in (sa, ta):
        if not 0.0 <= v <= 100.0:
            raise ValueError("percentage out of range")
    return (sa + (100.0 - ta)) / 2.0


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Argmax predictions; ties resolve to the lowest class index."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(images[i:i + batch_size]).argmax(dim=-1))
    model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def evaluate_accuracy(model: ModelBundle, dataset: LabeledDataset, split: Sequence[int]) -> float:
    split = list(split)
    if not split:
        raise ValueError("empty evaluation split")
    # evaluation reads are bookkeeping, not training provenance
    x = dataset._images[torch.as_tensor(split)]
    y = dataset._labels[torch.as_tensor(split)]
    with torch.no_grad():
        was_training = model.training
        model.eval()
        out_dim = model(x[:1]).shape[-1]
        model.train(was_training)
    if out_dim != dataset.num_classes:
        raise ValueError("class-count mismatch")
    pred = predict(model, x)
    return 100.0 * (pred == y).sum().item() / len(split)


def evaluate_pair(model: ModelBundle, ps: PairSplits, which: Literal["val", "test"] = "test") -> Metrics:
    sa = evaluate_accuracy(model, ps.pair.source, getattr(ps.source, which))
    ta = evaluate_accuracy(model, ps.pair.target, getattr(ps.target, which))
    return Metrics(sa, ta)


# ------------------------------------------------------------------------- config


class RunConfig(FrozenModel):
    seed: int = 0
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    optimizer_name: Literal["sgd", "adam"] = "adam"
    # None defers to the objective's own lambda / clamp_bound
    lambda_: float | None = Field(None, ge=0, alias="lambda")
    clamp_bound: float | None = Field(None, gt=0)
    device_hint: str = "cpu"
    lr_schedule: Literal["constant", "cosine"] = "constant"

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


def make_optimizer(params, name: str, lr: float) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def make_scheduler(opt: torch.optim.Optimizer, cfg: "RunConfig"):
    """Per-epoch learning-rate schedule; ``None`` for a constant rate."""
    if cfg.lr_schedule == "cosine" and cfg.epochs > 0:
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    return None


def batch_indices(indices: Sequence[int], batch_size: int, generator: torch.Generator,
                  shuffle: bool = True) -> list[torch.Tensor]:
    idx = torch.as_tensor(list(indices), dtype=torch.long)
    if shuffle:
        idx = idx[torch.randperm(len(idx), generator=generator)]
    return list(torch.split(idx, batch_size))


class CyclicSampler:
    """Endless shuffled batches over an index list."""

    def __init__(self, indices: Sequence[int], batch_size: int, generator: torch.Generator):
        self.indices = list(indices)
        self.batch_size = batch_size
        self.generator = generator
        self._queue: list[torch.Tensor] = []

    def next(self) -> torch.Tensor:
        if not self._queue:
            self._queue = batch_indices(self.indices, self.batch_size, self.generator)
        return self._queue.pop(0)
