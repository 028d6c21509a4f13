"""Differentiable regularizer catalog and the composite NTL objective.

The composite objective is

    L = CE_source - lambda * sum_r w_r * min(gain_r, tau)

where each regularizer enters in "gain" orientation: quantities that NTL
maximizes (KL to the true label, feature MMD) count positively, targeted
losses that NTL minimizes enter negated.
"""
from __future__ import annotations

import math
from typing import Callable, Literal, Sequence

import torch
import torch.nn.functional as F
from pydantic import Field

from .core import FrozenModel, ModelBundle, NTLError

KL_FLOOR = 1e-12
DEFAULT_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)

OutputReg = Literal["max_kl_to_label", "min_kl_to_error_label", "min_inverse_ce",
                    "min_uniform_kl", "min_kl_to_style_label"]
FeatureReg = Literal["max_mmd", "domain_confusion", "min_fda"]
MAXIMIZED = {"max_kl_to_label", "max_mmd"}


class ObjectiveSpec(FrozenModel):
    source_loss: Literal["cross_entropy"] = "cross_entropy"
    target_output_reg: OutputReg | None = None
    target_feature_reg: FeatureReg | None = None
    lambda_: float = Field(1.0, ge=0.0, alias="lambda")
    clamp_bound: float = Field(1.0, gt=0.0)
    mmd_bandwidth_scales: list[float] = Field(default_factory=lambda: list(DEFAULT_SCALES))
    reg_weights: dict[str, float] = Field(default_factory=dict)
    # "sample": clamp each target example's term before averaging; "batch": clamp the batch mean
    clamp_granularity: Literal["sample", "batch"] = "sample"

    model_config = FrozenModel.model_config | {"populate_by_name": True}

    def active(self) -> list[str]:
        return [r for r in (self.target_output_reg, self.target_feature_reg) if r is not None]


# ----------------------------------------------------------------- basic losses


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """``-log softmax(logits)[label]`` evaluated in the log domain."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    c = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, labels.reshape(*logits.shape[:-1], 1)).squeeze(-1)
    return nll.mean() if reduction == "mean" else nll


def soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    per = -(target * F.log_softmax(logits, dim=-1)).sum(-1)
    return per.mean() if reduction == "mean" else per


def kl_divergence(p: torch.Tensor, q: torch.Tensor, reduction: str = "none") -> torch.Tensor:
    """``sum_i p_i log(p_i / q_i)`` over the last axis, with ``q`` floored at 1e-12."""
    if p.shape[-1] != q.shape[-1]:
        raise ValueError("length mismatch")
    q = q.clamp_min(KL_FLOOR)
    plogp = torch.where(p > 0, p * torch.log(p.clamp_min(KL_FLOOR)), torch.zeros_like(p))
    kl = (plogp - p * torch.log(q)).sum(-1)
    return kl.mean() if reduction == "mean" else kl


def kl_to_distribution(target: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Per-sample ``KL(target || softmax(logits))`` in the log domain."""
    logq = F.log_softmax(logits, dim=-1)
    plogp = torch.where(target > 0, target * torch.log(target.clamp_min(KL_FLOOR)), torch.zeros_like(target))
    return (plogp - target * logq).sum(-1)


def kl_between_logits(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Per-sample ``KL(softmax(student) || softmax(teacher))``."""
    logp = F.log_softmax(student_logits, dim=-1)
    logq = F.log_softmax(teacher_logits, dim=-1)
    return (logp.exp() * (logp - logq)).sum(-1)


def clamped_target_term(raw_loss: torch.Tensor, bound: float) -> torch.Tensor:
    if bound <= 0:
        raise ValueError("bound must be positive")
    return torch.clamp(raw_loss, max=bound)


def uniform_kl(probs: torch.Tensor, reduction: str = "none") -> torch.Tensor:
    """``KL(probs || uniform) = log C - H(probs)``."""
    c = probs.shape[-1]
    plogp = torch.where(probs > 0, probs * torch.log(probs.clamp_min(KL_FLOOR)), torch.zeros_like(probs))
    kl = math.log(c) + plogp.sum(-1)
    return kl.mean() if reduction == "mean" else kl


def uniform_kl_from_logits(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return math.log(logits.shape[-1]) + (logp.exp() * logp).sum(-1)


# --------------------------------------------------------------- label helpers


def error_label(y, num_classes: int):
    """Deterministic wrong label ``(y + 1) mod C``."""
    if num_classes < 2:
        raise ValueError("error-label undefined for single class")
    return (y + 1) % num_classes


def inverse_label_distribution(y, num_classes: int) -> torch.Tensor:
    """Uniform mass over every class except ``y``; the one-hot of ``1 - y`` when C = 2."""
    if num_classes < 2:
        raise ValueError("inverse label undefined for single class")
    y = torch.as_tensor(y, dtype=torch.long)
    dist = torch.full((*y.shape, num_classes), 1.0 / (num_classes - 1))
    dist.scatter_(-1, y.unsqueeze(-1), 0.0)
    return dist


# ---------------------------------------------------------------- feature terms


def _pairwise_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d2 = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2 * a @ b.T
    return d2.clamp_min(0.0)


def median_bandwidth(z: torch.Tensor) -> torch.Tensor:
    """Lower median of pairwise distances (i < j) over a pooled sample; 1.0 if that is 0."""
    n = len(z)
    if n < 2:
        return torch.ones((), dtype=z.dtype)
    d2 = _pairwise_sq(z, z)
    iu = torch.triu_indices(n, n, offset=1)
    med = d2[iu[0], iu[1]].median()
    if med.item() <= 0:
        return torch.ones((), dtype=z.dtype)
    return med.sqrt()


def mmd_biased(za: torch.Tensor, zb: torch.Tensor, bandwidth_scales: Sequence[float] = DEFAULT_SCALES,
               sigma: float | torch.Tensor | None = None) -> torch.Tensor:
    """Biased squared MMD under a scale-averaged Gaussian kernel.

    ``k(u, v) = mean_s exp(-|u - v|^2 / (2 (s * sigma)^2))`` with ``sigma`` the
    median pairwise distance of the pooled batch unless given explicitly.
    """
    if len(za) == 0 or len(zb) == 0:
        raise ValueError("empty feature batch")
    if za.shape[-1] != zb.shape[-1]:
        raise ValueError("feature dimension mismatch")
    za = za.reshape(len(za), -1)
    zb = zb.reshape(len(zb), -1)
    if sigma is None:
        sigma = median_bandwidth(torch.cat([za, zb]))
    sigma = torch.as_tensor(sigma, dtype=za.dtype)
    daa, dbb, dab = _pairwise_sq(za, za), _pairwise_sq(zb, zb), _pairwise_sq(za, zb)

    def k(d2):
        return torch.stack([torch.exp(-d2 / (2 * (s * sigma) ** 2)) for s in bandwidth_scales]).mean(0)

    return k(daa).mean() + k(dbb).mean() - 2 * k(dab).mean()


def fda_term(z: torch.Tensor, y: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Trace ratio of between-class to within-class scatter."""
    if len(z) < 2:
        raise ValueError("fda_term needs at least 2 samples")
    z = z.reshape(len(z), -1)
    y = torch.as_tensor(y, dtype=torch.long)
    mu = z.mean(0)
    sb = z.new_zeros(())
    sw = z.new_zeros(())
    for c in torch.unique(y):
        zc = z[y == c]
        mc = zc.mean(0)
        sb = sb + len(zc) * ((mc - mu) ** 2).sum()
        sw = sw + ((zc - mc) ** 2).sum()
    return sb / (sw + eps)


def domain_confusion_loss(features: torch.Tensor, domain_labels: torch.Tensor, model: ModelBundle) -> torch.Tensor:
    """Mean cross-entropy of the auxiliary domain classifier on pooled features."""
    if model.aux_domain_head is None:
        raise NTLError("no domain head configured")
    return cross_entropy(model.domain_logits(features), domain_labels)


# ------------------------------------------------------------------- composite

StyleProvider = Callable[[torch.Tensor], torch.Tensor]


def regularizer_raw(name: str, *, model: ModelBundle, zs: torch.Tensor, zt: torch.Tensor,
                    logits_t: torch.Tensor, yt: torch.Tensor, xt: torch.Tensor,
                    spec: ObjectiveSpec, style_provider: StyleProvider | None = None,
                    per_sample: bool = False) -> torch.Tensor:
    """Unsigned value of one regularizer on a source/target batch pair.

    ``per_sample`` returns the per-example vector for ``max_kl_to_label``.
    """
    c = logits_t.shape[-1]
    if name == "max_kl_to_label":
        kl = kl_to_distribution(F.one_hot(yt, c).to(logits_t.dtype), logits_t)
        return kl if per_sample else kl.mean()
    if name == "min_kl_to_error_label":
        return kl_to_distribution(F.one_hot(error_label(yt, c), c).to(logits_t.dtype), logits_t).mean()
    if name == "min_inverse_ce":
        return soft_cross_entropy(logits_t, inverse_label_distribution(yt, c).to(logits_t.dtype))
    if name == "min_uniform_kl":
        return uniform_kl_from_logits(logits_t).mean()
    if name == "min_kl_to_style_label":
        if style_provider is None:
            raise NTLError("min_kl_to_style_label needs a style provider")
        return kl_to_distribution(style_provider(xt).to(logits_t.dtype), logits_t).mean()
    if name == "max_mmd":
        return mmd_biased(zs, zt, spec.mmd_bandwidth_scales)
    if name == "min_fda":
        return fda_term(zt, yt)
    if name == "domain_confusion":
        feats = torch.cat([zs, zt])
        dom = torch.cat([torch.zeros(len(zs)), torch.ones(len(zt))]).long()
        return domain_confusion_loss(feats, dom, model)
    raise ValueError(f"unknown regularizer {name!r}")


def gain(name: str, raw: torch.Tensor) -> torch.Tensor:
    return raw if name in MAXIMIZED else -raw


def eq1_composite(source_batch, target_batch, model: ModelBundle, spec: ObjectiveSpec,
                  style_provider: StyleProvider | None = None, return_terms: bool = False):
    """``CE_src - lambda * sum_r w_r * min(gain_r, tau)`` on one source and one target batch."""
    xs, ys = source_batch
    xt, yt = target_batch
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("empty batch")
    regs = spec.active()
    if spec.lambda_ > 0 and not regs:
        raise NTLError("no target regularizer configured")
    if spec.lambda_ == 0:
        loss = cross_entropy(model(xs), ys)
        return (loss, {}) if return_terms else loss
    zs = model.features(xs)
    zt = model.features(xt)
    loss_src = cross_entropy(model.omega(zs), ys)
    logits_t = model.omega(zt)
    terms = {}
    total = loss_src.new_zeros(())
    for r in regs:
        per_sample = spec.clamp_granularity == "sample" and r == "max_kl_to_label"
        raw = regularizer_raw(r, model=model, zs=zs, zt=zt, logits_t=logits_t, yt=yt, xt=xt,
                              spec=spec, style_provider=style_provider, per_sample=per_sample)
        term = clamped_target_term(gain(r, raw), spec.clamp_bound)
        if per_sample:
            term, raw = term.mean(), raw.mean()
        terms[r] = raw.detach()
        total = total + spec.reg_weights.get(r, 1.0) * term
    loss = loss_src - spec.lambda_ * total
    terms["source_ce"] = loss_src.detach()
    return (loss, terms) if return_terms else loss
