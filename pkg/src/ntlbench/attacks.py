"""Post-training threats: source/target fine-tuning, TransNTL and SHOT."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import torch
import torch.nn.functional as F
from pydantic import Field, model_validator

from . import auxgen
from .core import (FrozenModel, LabeledDataset, Metrics, ModelBundle, NTLError, PairSplits, ProvenanceError,
                   UnlabeledView, batch_indices, evaluate_pair, make_optimizer, parameter_checksum,
                   seed_everything)
from .methods import _check_finite
from .objectives import cross_entropy, kl_between_logits

FT_STRATEGIES = ("initFC_all", "initFC_FC", "direct_FC", "direct_all")
FAMILY_STRATEGIES = {
    "source_ft": set(FT_STRATEGIES) | {"transntl"},
    "target_ft": set(FT_STRATEGIES),
    "sfda": {"shot"},
}


class AttackSpec(FrozenModel):
    family: Literal["source_ft", "target_ft", "sfda"]
    strategy: Literal["initFC_all", "initFC_FC", "direct_FC", "direct_all", "transntl", "shot"]
    budget_fraction: float = Field(0.10, gt=0.0, le=1.0)
    epochs: int = Field(10, ge=0)
    learning_rate: float | None = Field(None, gt=0.0)
    optimizer_name: Literal["sgd", "adam"] | None = None
    batch_size: int = Field(32, gt=0)
    seed: int = 0
    perturbation_magnitude: float = Field(0.2, gt=0.0, le=1.0)
    shot_beta: float = Field(0.3, ge=0.0)

    @model_validator(mode="after")
    def _compatible(self):
        if self.strategy not in FAMILY_STRATEGIES[self.family]:
            raise ValueError(f"strategy {self.strategy} not allowed under {self.family}")
        return self

    @property
    def label(self) -> str:
        names = {"source_ft": "SourceFT", "target_ft": "TargetFT", "sfda": "SFDA"}
        return f"{names[self.family]}/{self.strategy}"

    def resolved(self, lr: float, optimizer_name: str) -> "AttackSpec":
        """Fill unset optimizer fields from pre-training: same family, 0.1x learning rate."""
        return self.model_copy(update={
            "learning_rate": self.learning_rate or 0.1 * lr,
            "optimizer_name": self.optimizer_name or optimizer_name,
        })


def _lr(cfg: AttackSpec) -> float:
    return cfg.learning_rate if cfg.learning_rate is not None else 1e-4


def _opt(cfg: AttackSpec) -> str:
    return cfg.optimizer_name or "adam"


def attack_subset(split: Sequence[int], fraction: float, seed: int = 0) -> list[int]:
    """``floor(fraction * N)`` indices drawn without replacement, returned sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    split = list(split)
    k = int(fraction * len(split) + 1e-9)
    if k == 0:
        raise ValueError("attack budget too small")
    perm = torch.randperm(len(split), generator=torch.Generator().manual_seed(seed))[:k]
    return sorted(split[i] for i in perm.tolist())


# ------------------------------------------------------------------ fine-tuning


def finetune_attack(model: ModelBundle, data: tuple[LabeledDataset, Sequence[int]], strategy: str,
                    cfg: AttackSpec) -> ModelBundle:
    """Fine-tune a private copy with one of the four basic strategies.

    ``initFC_*`` redraws the head first; ``*_FC`` trains only the head with the
    feature extractor frozen; ``*_all`` trains every parameter.
    """
    if strategy not in FT_STRATEGIES:
        raise ValueError(f"unknown fine-tuning strategy {strategy!r}")
    dataset, idx = data
    if not len(idx):
        raise ValueError("empty attack data")
    seed_everything(cfg.seed)
    attacked = model.clone()
    g = torch.Generator().manual_seed(cfg.seed)
    if strategy.startswith("initFC"):
        attacked.reset_omega(g)
    head_only = strategy.endswith("_FC")
    if head_only:
        for p in attacked.phi.parameters():
            p.requires_grad_(False)
    params = attacked.omega.parameters() if head_only else attacked.parameters()
    opt = make_optimizer(params, _opt(cfg), _lr(cfg))
    attacked.train()
    for epoch in range(cfg.epochs):
        for b in batch_indices(idx, cfg.batch_size, g):
            x, y = dataset.take(b)
            loss = cross_entropy(attacked(x), y)
            _check_finite(loss, f"{strategy} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in attacked.parameters():
        p.requires_grad_(True)
    return attacked


def transntl_attack(model: ModelBundle, source_subset: tuple[LabeledDataset, Sequence[int]],
                    pset: Sequence, cfg: AttackSpec) -> ModelBundle:
    """Self-distillation from the frozen input model's clean predictions onto perturbed source images."""
    if not pset:
        raise ValueError("empty perturbation set")
    dataset, idx = source_subset
    if dataset.role != "source":
        raise ProvenanceError(f"transntl_attack needs source-domain data, got role {dataset.role!r}")
    seed_everything(cfg.seed)
    teacher = model.clone().eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    student = model.clone()
    opt = make_optimizer(student.parameters(), _opt(cfg), _lr(cfg))
    g = torch.Generator().manual_seed(cfg.seed)
    aug_g = torch.Generator().manual_seed(cfg.seed + 1)
    student.train()
    for epoch in range(cfg.epochs):
        for b in batch_indices(idx, cfg.batch_size, g):
            x, y = dataset.take(b)
            with torch.no_grad():
                t_logits = teacher(x)
            loss = cross_entropy(student(x), y)
            for p in pset:
                loss = loss + kl_between_logits(student(p(x, aug_g)), t_logits).mean()
            _check_finite(loss, f"transntl epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return student


# ------------------------------------------------------------------------- SHOT


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(1e-12))).sum(-1)


@torch.no_grad()
def shot_pseudo_labels(features: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Nearest-centroid labels under cosine distance, centroids weighted by soft predictions.

    Features get a constant 1 appended and are L2-normalized before use.
    """
    f = torch.cat([features, torch.ones(len(features), 1, dtype=features.dtype)], 1)
    f = F.normalize(f, dim=1)
    centroids = probs.T @ f / (1e-8 + probs.sum(0)[:, None])
    dist = 1 - F.normalize(f, dim=1) @ F.normalize(centroids, dim=1).T
    return dist.argmin(1)


def information_maximization(logits: torch.Tensor) -> torch.Tensor:
    """Mean per-sample entropy minus the entropy of the mean prediction."""
    p = F.softmax(logits, -1)
    return _entropy(p).mean() - _entropy(p.mean(0))


def shot_attack(model: ModelBundle, target_unlabeled: UnlabeledView, cfg: AttackSpec) -> ModelBundle:
    """Source-free adaptation: head frozen, extractor trained on unlabeled target images."""
    if not isinstance(target_unlabeled, UnlabeledView):
        raise ProvenanceError("shot_attack accepts only an unlabeled view of the target data")
    n = len(target_unlabeled)
    if n < model.num_classes:
        raise ValueError("insufficient adaptation data")
    seed_everything(cfg.seed)
    attacked = model.clone()
    for p in attacked.omega.parameters():
        p.requires_grad_(False)
    opt = make_optimizer(attacked.phi.parameters(), _opt(cfg), _lr(cfg))
    g = torch.Generator().manual_seed(cfg.seed)
    images = target_unlabeled.take_images(list(range(n)))
    for epoch in range(cfg.epochs):
        attacked.eval()
        with torch.no_grad():
            feats = attacked.features(images)
            pseudo = shot_pseudo_labels(feats, F.softmax(attacked.omega(feats), -1))
        attacked.train()
        for b in batch_indices(range(n), cfg.batch_size, g):
            logits = attacked(images[b])
            loss = information_maximization(logits)
            if cfg.shot_beta > 0:
                loss = loss + cfg.shot_beta * cross_entropy(logits, pseudo[b])
            _check_finite(loss, f"shot epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in attacked.omega.parameters():
        p.requires_grad_(True)
    return attacked


# ---------------------------------------------------------------------- battery


@dataclass
class BatteryRow:
    spec: AttackSpec
    pre: Metrics
    post: Metrics
    provenance: dict = field(default_factory=dict)

    @property
    def deltas(self) -> dict:
        return {"SA": self.post.SA - self.pre.SA, "TA": self.post.TA - self.pre.TA,
                "OA": self.post.OA - self.pre.OA}


def run_attack(model: ModelBundle, ps: PairSplits, spec: AttackSpec) -> ModelBundle:
    """Dispatch one attack on its budget-limited subset; returns the attacked copy."""
    source, target = ps.pair.source, ps.pair.target
    if spec.family == "source_ft":
        idx = attack_subset(ps.source.train, spec.budget_fraction, spec.seed)
        if spec.strategy == "transntl":
            pset = auxgen.perturbation_set("transntl_default", spec.perturbation_magnitude)
            return transntl_attack(model, (source, idx), pset, spec)
        return finetune_attack(model, (source, idx), spec.strategy, spec)
    idx = attack_subset(ps.target.train, spec.budget_fraction, spec.seed)
    if spec.family == "target_ft":
        return finetune_attack(model, (target, idx), spec.strategy, spec)
    return shot_attack(model, target.unlabeled(idx), spec)


def run_threat_battery(model: ModelBundle, ps: PairSplits, specs: Sequence[AttackSpec],
                       pretrain_lr: float = 1e-3, pretrain_optimizer: str = "adam") -> list[BatteryRow]:
    """Evaluate once, then run every attack from a fresh copy and evaluate on test splits."""
    if not specs:
        return []
    checksum = parameter_checksum(model)
    pre = evaluate_pair(model, ps, "test")
    rows = []
    for spec in specs:
        spec = spec.resolved(pretrain_lr, pretrain_optimizer)
        before = {ds.role: dict(ds.reads) for ds in (ps.pair.source, ps.pair.target)}
        attacked = run_attack(model, ps, spec)
        prov = {ds.role: {k: ds.reads.get(k, 0) - before[ds.role].get(k, 0) for k in ("images", "labels")}
                for ds in (ps.pair.source, ps.pair.target)}
        if spec.family == "sfda" and prov["target"]["labels"]:
            raise ProvenanceError("SFDA attack read target labels")
        if spec.strategy == "transntl" and sum(prov["target"].values()):
            raise ProvenanceError("TransNTL attack read target-domain data")
        if parameter_checksum(model) != checksum:
            raise NTLError("attack modified the input model")
        rows.append(BatteryRow(spec, pre, evaluate_pair(attacked, ps, "test"), prov))
    return rows
