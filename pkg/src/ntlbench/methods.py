"""Training pipelines: supervised reference, target-specified NTL, CUTI-style,
DSO, source-only wrapper, and SOPHON meta-training."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import Field, model_validator
from torch.func import functional_call

from . import auxgen
from .core import (CyclicSampler, DivergenceError, FrozenModel, LabeledDataset, ModelBundle, NTLError,
                   PairSplits, ProvenanceError, RunConfig, batch_indices, evaluate_accuracy, make_optimizer,
                   _init_linear, make_scheduler, seed_everything)
from .objectives import (ObjectiveSpec, cross_entropy, eq1_composite, error_label, inverse_label_distribution,
                         kl_between_logits, kl_to_distribution, soft_cross_entropy, uniform_kl_from_logits)

log = logging.getLogger(__name__)

METHOD_PARAMS = {
    "sl": set(),
    "ntl": {"warmup_epochs"},
    "cuti_style": {"noise_std", "warmup_epochs"},
    "dso": {"epsilon", "ascent_steps", "warmup_epochs"},
    "sophon": {"inner_steps", "inner_lr", "meta_lr", "meta_steps", "risk", "simulate", "second_order",
               "source_weight"},
    "source_only_wrapper": {"strategy", "magnitude", "ops_per_sample", "noise_std", "warmup_epochs"},
}
MethodName = Literal["sl", "ntl", "cuti_style", "dso", "sophon", "source_only_wrapper"]


class MethodSpec(FrozenModel):
    name: MethodName = "ntl"
    objective: ObjectiveSpec = Field(default_factory=ObjectiveSpec)
    method_params: dict[str, float | int | str | bool] = Field(default_factory=dict)
    defense_consistency_weight: float = Field(0.0, ge=0.0)
    defense_magnitude: float = Field(0.2, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_params(self):
        unknown = set(self.method_params) - METHOD_PARAMS[self.name]
        if unknown:
            raise ValueError(f"unknown method_params for {self.name}: {sorted(unknown)}")
        return self

    def param(self, key: str, default):
        return self.method_params.get(key, default)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_sa: list[float] = field(default_factory=list)
    val_ta: list[float] = field(default_factory=list)
    provenance: dict[str, dict[str, int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"train_loss": self.train_loss, "train_acc": self.train_acc, "val_sa": self.val_sa,
                "val_ta": self.val_ta, "provenance": self.provenance}


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise DivergenceError(where)


def _reads(*datasets: LabeledDataset) -> dict:
    return {ds.role: dict(ds.reads) for ds in datasets}


def _diff_reads(before: dict, datasets) -> dict:
    out = {}
    for ds in datasets:
        b = before.get(ds.role, {})
        out[ds.role] = {k: ds.reads.get(k, 0) - b.get(k, 0) for k in ("images", "labels")}
    return out


def _val_metrics(model, ps: PairSplits | None, source, source_val, hist: History):
    if source_val:
        hist.val_sa.append(evaluate_accuracy(model, source, source_val))
    if ps is not None and ps.target.val:
        hist.val_ta.append(evaluate_accuracy(model, ps.pair.target, ps.target.val))


# --------------------------------------------------------------------------- SL


def train_supervised(model: ModelBundle, source: tuple[LabeledDataset, Sequence[int]], cfg: RunConfig,
                     source_val: Sequence[int] = ()) -> tuple[ModelBundle, History]:
    """Mini-batch cross-entropy training on the source split. The input model is not modified."""
    dataset, split = source
    if not len(split):
        raise ValueError("empty train split")
    seed_everything(cfg.seed)
    model = model.clone()
    opt = make_optimizer(model.parameters(), cfg.optimizer_name, cfg.learning_rate)
    sched = make_scheduler(opt, cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    hist = History()
    before = _reads(dataset)
    for epoch in range(cfg.epochs):
        model.train()
        tot, correct, n = 0.0, 0, 0
        for idx in batch_indices(split, cfg.batch_size, g):
            x, y = dataset.take(idx)
            logits = model(x)
            loss = cross_entropy(logits, y)
            _check_finite(loss, f"train_supervised epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(y)
            correct += (logits.argmax(-1) == y).sum().item()
            n += len(y)
        if sched is not None:
            sched.step()
        hist.train_loss.append(tot / n)
        hist.train_acc.append(100.0 * correct / n)
        _val_metrics(model, None, dataset, source_val, hist)
    hist.provenance = _diff_reads(before, [dataset])
    return model, hist


# -------------------------------------------------------------- defense term


def transntl_defense_term(model: nn.Module, source_batch: torch.Tensor, perturbation_set: Sequence[Callable],
                          generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over perturbations of ``KL(f(p(x)) || stopgrad f(x))``."""
    if not perturbation_set:
        raise ValueError("empty perturbation set")
    with torch.no_grad():
        ref = model(source_batch)
    terms = [kl_between_logits(model(p(source_batch, generator)), ref).mean() for p in perturbation_set]
    return torch.stack(terms).mean()


# -------------------------------------------------------------------------- NTL


def _ntl_loop(model: ModelBundle, ps: PairSplits | None, source: LabeledDataset, source_train, source_val,
              target_batch_fn: Callable[[torch.Tensor], tuple], spec: MethodSpec, cfg: RunConfig,
              style_provider=None, watched=()) -> tuple[ModelBundle, History]:
    seed_everything(cfg.seed)
    model = model.clone()
    opt = make_optimizer(model.parameters(), cfg.optimizer_name, cfg.learning_rate)
    sched = make_scheduler(opt, cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    aux_g = torch.Generator().manual_seed(cfg.seed + 7919)
    pset = auxgen.perturbation_set("transntl_default", spec.defense_magnitude)
    hist = History()
    before = _reads(*watched)
    warmup = int(spec.param("warmup_epochs", 0))
    for epoch in range(cfg.epochs):
        model.train()
        tot, correct, n = 0.0, 0, 0
        objective = spec.objective
        if epoch < warmup:
            # linear ramp of the trade-off weight, starting from 0
            objective = objective.model_copy(update={"lambda_": objective.lambda_ * epoch / warmup})
        for idx in batch_indices(source_train, cfg.batch_size, g):
            xs, ys = source.take(idx)
            xt, yt = target_batch_fn(xs, ys, aux_g)
            loss = eq1_composite((xs, ys), (xt, yt), model, objective, style_provider)
            if spec.defense_consistency_weight > 0:
                loss = loss + spec.defense_consistency_weight * transntl_defense_term(model, xs, pset, aux_g)
            _check_finite(loss, f"{spec.name} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                correct += (model(xs).argmax(-1) == ys).sum().item()
            tot += loss.item() * len(ys)
            n += len(ys)
        if sched is not None:
            sched.step()
        hist.train_loss.append(tot / n)
        hist.train_acc.append(100.0 * correct / n)
        _val_metrics(model, ps, source, source_val, hist)
    hist.provenance = _diff_reads(before, watched)
    return model, hist


def train_ntl(model: ModelBundle, ps: PairSplits, spec: MethodSpec, cfg: RunConfig,
              style_provider=None) -> tuple[ModelBundle, History]:
    """Target-specified NTL: one source and one target batch per step under the composite objective."""
    if spec.objective.lambda_ > 0 and not spec.objective.active():
        raise NTLError("no target regularizer configured")
    if not ps.target.train:
        raise ValueError("empty target train split")
    target = ps.pair.target
    sampler = CyclicSampler(ps.target.train, cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 1))

    def target_batch(xs, ys, g):
        return target.take(sampler.next())

    return _ntl_loop(model, ps, ps.pair.source, ps.source.train, ps.source.val, target_batch, spec, cfg,
                     style_provider, watched=(ps.pair.source, target))


def make_cuti_style_batch(source_batch: torch.Tensor, noise_std: float, generator=None):
    return auxgen.make_cuti_style_batch(source_batch, noise_std, generator)


def train_cuti(model: ModelBundle, ps: PairSplits, spec: MethodSpec, cfg: RunConfig,
               target_specified: bool = True) -> tuple[ModelBundle, History]:
    """NTL against style-noised source images, optionally pooled with the real target batch."""
    std = float(spec.param("noise_std", 0.5))
    target = ps.pair.target
    sampler = CyclicSampler(ps.target.train, cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 1))

    def target_batch(xs, ys, g):
        xa = auxgen.make_cuti_style_batch(xs, std, g)
        if not target_specified:
            return xa, ys
        xt, yt = target.take(sampler.next())
        return torch.cat([xt, xa]), torch.cat([yt, ys])

    watched = (ps.pair.source, target)
    return _ntl_loop(model, ps if target_specified else None, ps.pair.source, ps.source.train, ps.source.val,
                     target_batch, spec, cfg, watched=watched)


def train_source_only(model: ModelBundle, source: LabeledDataset, split, spec: MethodSpec, cfg: RunConfig,
                      source_val: Sequence[int] = ()) -> tuple[ModelBundle, History]:
    """Source-only NTL: synthesize an auxiliary domain from the source split and treat it as target."""
    strategy = str(spec.param("strategy", "strong_augment"))
    if strategy == "strong_augment":
        params = auxgen.AugmentationSpec(magnitude=float(spec.param("magnitude", 0.5)),
                                         ops_per_sample=int(spec.param("ops_per_sample", 2)))
    else:
        params = {"noise_std": float(spec.param("noise_std", 0.5))}
    train_part = source.subset(split)
    aux = auxgen.build_auxiliary_domain(train_part, strategy, params, seed=cfg.seed)
    sampler = CyclicSampler(aux.all_indices(), cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 1))

    def target_batch(xs, ys, g):
        return aux.take(sampler.next())

    return _ntl_loop(model, None, source, split, source_val, target_batch, spec, cfg,
                     watched=(source, aux))


# -------------------------------------------------------------------------- DSO


def dso_perturb(model: nn.Module, x: torch.Tensor, y: torch.Tensor, epsilon: float, steps: int) -> torch.Tensor:
    """Worst case in the L-inf ball: sign ascent on the error-label KL, step epsilon / steps."""
    if epsilon <= 0 or steps <= 0:
        return torch.zeros_like(x)
    c = model(x[:1]).shape[-1]
    target = F.one_hot(error_label(y, c), c).float()
    delta = torch.zeros_like(x, requires_grad=True)
    step = epsilon / steps
    for _ in range(steps):
        loss = kl_to_distribution(target, model(x + delta)).mean()
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta += step * grad.sign()
            delta.clamp_(-epsilon, epsilon)
            # stay inside the valid pixel range
            delta.copy_((x + delta).clamp(0, 1) - x)
    return delta.detach()


def train_dso(model: ModelBundle, source: tuple[LabeledDataset, Sequence[int]], spec: MethodSpec,
              cfg: RunConfig, source_val: Sequence[int] = (),
              forbidden: Sequence[LabeledDataset] = ()) -> tuple[ModelBundle, History]:
    """Source-only NTL by pushing an uncertainty set around each source image to the error label.

    ``forbidden`` datasets (e.g. the real target) are watched; any read aborts.
    """
    dataset, split = source
    if dataset.role == "target":
        raise ProvenanceError("train_dso must not consume target-domain data")
    eps = float(spec.param("epsilon", 8 / 255))
    steps = int(spec.param("ascent_steps", 3))
    warmup = int(spec.param("warmup_epochs", 0))
    seed_everything(cfg.seed)
    model = model.clone()
    opt = make_optimizer(model.parameters(), cfg.optimizer_name, cfg.learning_rate)
    sched = make_scheduler(opt, cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    hist = History()
    before = _reads(dataset, *forbidden)
    forbidden_before = [sum(ds.reads.values()) for ds in forbidden]
    c = model.num_classes
    for epoch in range(cfg.epochs):
        model.train()
        tot, correct, n = 0.0, 0, 0
        lam = spec.objective.lambda_ * (epoch / warmup if epoch < warmup else 1.0)
        for idx in batch_indices(split, cfg.batch_size, g):
            x, y = dataset.take(idx)
            delta = dso_perturb(model, x, y, eps, steps)
            logits = model(x)
            err = F.one_hot(error_label(y, c), c).float()
            loss = cross_entropy(logits, y) + lam * kl_to_distribution(err, model(x + delta)).mean()
            _check_finite(loss, f"dso epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(y)
            correct += (logits.argmax(-1) == y).sum().item()
            n += len(y)
        if sched is not None:
            sched.step()
        hist.train_loss.append(tot / n)
        hist.train_acc.append(100.0 * correct / n)
        _val_metrics(model, None, dataset, source_val, hist)
    for ds, b in zip(forbidden, forbidden_before):
        if sum(ds.reads.values()) != b:
            raise ProvenanceError(f"train_dso read from forbidden dataset {ds.name}")
    hist.provenance = _diff_reads(before, [dataset, *forbidden])
    return model, hist


# ----------------------------------------------------------------------- SOPHON


def _risk(kind: str, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Targeted target-domain loss; lower means worse target performance."""
    if kind == "inverse_ce":
        return soft_cross_entropy(logits, inverse_label_distribution(y, logits.shape[-1]).to(logits.dtype))
    if kind == "uniform_kl":
        return uniform_kl_from_logits(logits).mean()
    raise ValueError(f"unknown sophon risk {kind!r}")


def sophon_meta_gradient(model: nn.Module, batches: Sequence[tuple[torch.Tensor, torch.Tensor]],
                         inner_steps: int, inner_lr: float, risk: str = "inverse_ce",
                         second_order: bool = False, trainable: Callable[[str], bool] | None = None,
                         reset_head: Callable[[dict], dict] | None = None) -> list[torch.Tensor]:
    """Gradient of the accumulated target risk along a simulated fine-tuning run.

    Simulates ``inner_steps`` SGD steps of cross-entropy on the target batches
    starting from a copy of the model's parameters, summing the targeted risk
    at every visited point (before the first step and after each step). The
    first-order variant treats each visited point as independent of the
    starting parameters. The model itself is never modified.
    """
    if inner_steps < 1:
        raise NTLError("sophon requires inner steps")
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    base = [dict(model.named_parameters())[n] for n in names]
    if second_order:
        fast = dict(zip(names, base))
    else:
        fast = {n: p.detach().clone().requires_grad_(True) for n, p in zip(names, base)}
    if reset_head is not None:
        fast = reset_head(fast)
    trainable = trainable or (lambda n: True)
    acc = [torch.zeros_like(p) for p in base]
    total = None
    for k in range(inner_steps + 1):
        x, y = batches[k % len(batches)]
        logits = functional_call(model, fast, (x,))
        r = _risk(risk, logits, y)
        if second_order:
            total = r if total is None else total + r
        else:
            grads = torch.autograd.grad(r, list(fast.values()), allow_unused=True,
                                        retain_graph=k < inner_steps)
            for a, gk in zip(acc, grads):
                if gk is not None:
                    a += gk
        if k == inner_steps:
            break
        ce = cross_entropy(logits, y)
        keys = [n for n in names if trainable(n)]
        grads = torch.autograd.grad(ce, [fast[n] for n in keys], create_graph=second_order)
        new = dict(fast)
        for n, gk in zip(keys, grads):
            w = fast[n] - inner_lr * gk
            new[n] = w if second_order else w.detach().requires_grad_(True)
        if not second_order:
            for n in names:
                if n not in keys:
                    new[n] = fast[n].detach().requires_grad_(True)
        fast = new
    if second_order:
        grads = torch.autograd.grad(total, base, allow_unused=True)
        return [torch.zeros_like(p) if gk is None else gk for p, gk in zip(base, grads)]
    return acc


def _fresh_head(model: ModelBundle, fast: dict, generator: torch.Generator) -> dict:
    """Swap the head entries of ``fast`` for a fresh draw; no gradient reaches the base head."""
    head = copy.deepcopy(model.omega)
    for m in head.modules():
        if isinstance(m, nn.Linear):
            _init_linear(m, generator)
    out = dict(fast)
    for n, p in head.named_parameters():
        out[f"omega.{n}"] = p.detach().requires_grad_(True)
    return out


def sophon_simulation_block(model: ModelBundle, target: LabeledDataset, target_split: Sequence[int],
                            spec: MethodSpec, meta_opt: torch.optim.Optimizer, generator: torch.Generator,
                            batch_size: int, source_batches: Callable[[], tuple] | None = None) -> float:
    """One non-fine-tunability block: ``meta_steps`` meta-updates of the base parameters.

    Each meta-update simulates fine-tuning on a private copy and applies only
    the resulting meta-gradient (descending the targeted risk) to the base.
    """
    k = int(spec.param("inner_steps", 3))
    if k < 1:
        raise NTLError("sophon requires inner steps")
    inner_lr = float(spec.param("inner_lr", 0.01))
    risk = str(spec.param("risk", "inverse_ce"))
    steps = int(spec.param("meta_steps", 10))
    simulate = [m.strip() for m in str(spec.param("simulate", "all,fc")).split(",")]
    if not set(simulate) <= {"all", "fc", "initfc"}:
        raise ValueError(f"unknown sophon simulation mode in {simulate}")
    second = bool(spec.param("second_order", False))
    src_w = float(spec.param("source_weight", 1.0))
    sampler = CyclicSampler(target_split, batch_size, generator)
    params = [p for p in model.parameters() if p.requires_grad]
    last = 0.0
    for step in range(steps):
        mode = simulate[step % len(simulate)]
        batches = [target.take(sampler.next()) for _ in range(k + 1)]
        trainable = (lambda n: n.startswith("omega.")) if mode in ("fc", "initfc") else None
        reset = (lambda fast: _fresh_head(model, fast, generator)) if mode == "initfc" else None
        meta = sophon_meta_gradient(model, batches, k, inner_lr, risk, second, trainable, reset)
        meta_opt.zero_grad()
        for p, gk in zip(params, meta):
            p.grad = gk.clone()
        if source_batches is not None and src_w > 0:
            xs, ys = source_batches()
            src = src_w * cross_entropy(model(xs), ys)
            _check_finite(src, "sophon meta step")
            src.backward()
        if any(not torch.isfinite(p.grad).all() for p in params if p.grad is not None):
            raise DivergenceError("sophon meta-gradient")
        meta_opt.step()
        last = float(sum(gk.norm() for gk in meta))
    return last


def train_sophon(model: ModelBundle, ps: PairSplits, spec: MethodSpec, cfg: RunConfig) -> tuple[ModelBundle, History]:
    """Alternate a simulated-fine-tuning block with one epoch of source maintenance."""
    if int(spec.param("inner_steps", 3)) < 1:
        raise NTLError("sophon requires inner steps")
    seed_everything(cfg.seed)
    model = model.clone()
    source, target = ps.pair.source, ps.pair.target
    meta_lr = float(spec.param("meta_lr", cfg.learning_rate))
    meta_opt = make_optimizer(model.parameters(), cfg.optimizer_name, meta_lr)
    opt = make_optimizer(model.parameters(), cfg.optimizer_name, cfg.learning_rate)
    sched = make_scheduler(opt, cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    tg = torch.Generator().manual_seed(cfg.seed + 1)
    src_sampler = CyclicSampler(ps.source.train, cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 2))
    tgt_sampler = CyclicSampler(ps.target.train, cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 3))
    hist = History()
    before = _reads(source, target)
    for epoch in range(cfg.epochs):
        model.train()
        sophon_simulation_block(model, target, ps.target.train, spec, meta_opt, tg, cfg.batch_size,
                                source_batches=lambda: source.take(src_sampler.next()))
        tot, correct, n = 0.0, 0, 0
        for idx in batch_indices(ps.source.train, cfg.batch_size, g):
            x, y = source.take(idx)
            logits = model(x)
            loss = cross_entropy(logits, y)
            if spec.objective.active() and spec.objective.lambda_ > 0:
                xt, yt = target.take(tgt_sampler.next())
                loss = eq1_composite((x, y), (xt, yt), model, spec.objective)
            _check_finite(loss, f"sophon epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(y)
            correct += (logits.argmax(-1) == y).sum().item()
            n += len(y)
        if sched is not None:
            sched.step()
        hist.train_loss.append(tot / n)
        hist.train_acc.append(100.0 * correct / n)
        _val_metrics(model, ps, source, ps.source.val, hist)
    hist.provenance = _diff_reads(before, [source, target])
    return model, hist


# ------------------------------------------------------------------- dispatcher


def train_method(model: ModelBundle, ps: PairSplits, spec: MethodSpec, cfg: RunConfig):
    """Run the pipeline named by ``spec.name`` on a split domain pair.

    ``cfg.lambda_`` and ``cfg.clamp_bound``, when set, override the objective's values.
    """
    overrides = {k: v for k, v in (("lambda_", cfg.lambda_), ("clamp_bound", cfg.clamp_bound)) if v is not None}
    if overrides:
        spec = spec.model_copy(update={"objective": spec.objective.model_copy(update=overrides)})
    if spec.name == "sl":
        return train_supervised(model, (ps.pair.source, ps.source.train), cfg, ps.source.val)
    if spec.name == "ntl":
        return train_ntl(model, ps, spec, cfg)
    if spec.name == "cuti_style":
        return train_cuti(model, ps, spec, cfg)
    if spec.name == "dso":
        return train_dso(model, (ps.pair.source, ps.source.train), spec, cfg, ps.source.val,
                         forbidden=(ps.pair.target,))
    if spec.name == "sophon":
        return train_sophon(model, ps, spec, cfg)
    if spec.name == "source_only_wrapper":
        return train_source_only(model, ps.pair.source, ps.source.train, spec, cfg, ps.source.val)
    raise ValueError(f"unknown method {spec.name!r}")
