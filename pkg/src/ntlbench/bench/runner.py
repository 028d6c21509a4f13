"""Config-driven training, attack batteries and hyperparameter sweeps."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from ..attacks import AttackSpec, run_threat_battery
from ..core import DEFAULT_ARCH, DomainPair, NTLError, PairSplits, build_model, evaluate_pair
from ..data import build_aa_pair, build_ov_pair, load_or_synthesize, make_domain_pair, split_pair
from ..methods import train_method
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, DatasetBlock, ExperimentConfig, dump_config, load_config, sweep_variants
from .registry import AttackResult, MetricBlock, Registry, RunRecord

log = logging.getLogger(__name__)


def build_pair(ds: DatasetBlock) -> DomainPair:
    src = ds.paths if ds.base == "digits_idx" else ds.seed
    base = load_or_synthesize(ds.base, src, n=ds.n, image_size=ds.image_size)
    if ds.trigger is not None:
        return (build_ov_pair if ds.application == "ov" else build_aa_pair)(base, ds.trigger)
    return make_domain_pair(base, ds.shift, seed=ds.seed)


def prepare(cfg: ExperimentConfig) -> tuple[PairSplits, dict]:
    pair = build_pair(cfg.dataset)
    arch = {**DEFAULT_ARCH, "image_size": cfg.dataset.image_size, **cfg.arch,
            "in_channels": pair.source.image_shape[0], "num_classes": pair.num_classes}
    if cfg.method.objective.target_feature_reg == "domain_confusion":
        arch["domain_head"] = True
    return split_pair(pair, cfg.dataset.split_seed), arch


def _as_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, dict):
        return ExperimentConfig.model_validate(config)
    return load_config(config)


def _battery(model, ps: PairSplits, specs: Sequence[AttackSpec], cfg: ExperimentConfig) -> list[AttackResult]:
    rows = run_threat_battery(model, ps, specs, cfg.run.learning_rate, cfg.run.optimizer_name)
    return [AttackResult(spec=r.spec.model_dump(mode="json"), label=r.spec.label, pre=MetricBlock.of(r.pre),
                         post=MetricBlock.of(r.post), provenance=r.provenance) for r in rows]


def _store(reg: Registry, record: RunRecord) -> str:
    """Append ``record``; a replay of an existing run_id must reproduce its metrics."""
    if not reg.append(record):
        old = reg.get(record.run_id)
        same = old.pretrain == record.pretrain and [(a.pre, a.post) for a in old.attacks] == \
            [(a.pre, a.post) for a in record.attacks]
        if not same:
            raise NTLError(f"replay of {record.run_id} produced different metrics")
    return record.run_id


def cli_train(config, registry: Registry | str | None = None) -> str:
    """Pre-train per the config, run its attacks block, register the RunRecord; returns run_id."""
    cfg = _as_config(config)
    reg = registry if isinstance(registry, Registry) else Registry(registry)
    run_id = cfg.run_id()
    replay = reg.exists(run_id)
    t0 = time.perf_counter()
    ps, arch = prepare(cfg)
    model = build_model(arch, cfg.run.seed)
    trained, history = train_method(model, ps, cfg.method, cfg.run)
    pre, pre_val = evaluate_pair(trained, ps, "test"), evaluate_pair(trained, ps, "val")
    attacks = _battery(trained, ps, cfg.attacks, cfg)
    out = Path(cfg.output_dir) / run_id
    ckpt, hist = out / "model.ckpt", out / "history.json"
    if not replay:
        save_checkpoint(trained, ckpt)
        hist.write_text(json.dumps(history.as_dict(), indent=2))
        (out / "config.yaml").write_text(dump_config(cfg))
    record = RunRecord(run_id=run_id, config=cfg.canonical(), pretrain=MetricBlock.of(pre),
                       pretrain_val=MetricBlock.of(pre_val), attacks=attacks,
                       wall_time_s=time.perf_counter() - t0,
                       artifacts={"checkpoint": str(ckpt), "history": str(hist)})
    log.info("run %s: %s", run_id, record.pretrain)
    return _store(reg, record)


def cli_attack(run_id: str, specs: Sequence[AttackSpec | dict], registry: Registry | str | None = None) -> str:
    """Run a threat battery against a stored checkpoint; registers a new attack record."""
    reg = registry if isinstance(registry, Registry) else Registry(registry)
    parent = reg.get(run_id)
    specs = [s if isinstance(s, AttackSpec) else AttackSpec.model_validate(s) for s in specs]
    if not specs:
        raise ConfigError("no attack specs given", ["attacks"])
    cfg = ExperimentConfig.model_validate(parent.config)
    t0 = time.perf_counter()
    ps, arch = prepare(cfg)
    model = load_checkpoint(parent.artifacts["checkpoint"], expected_arch=arch)
    attacks = _battery(model, ps, specs, cfg)
    blob = json.dumps([run_id, [s.model_dump(mode="json") for s in specs]], sort_keys=True)
    record = RunRecord(run_id=hashlib.sha256(blob.encode()).hexdigest()[:16], kind="attack",
                       parent_run_id=run_id, config=parent.config, pretrain=parent.pretrain,
                       pretrain_val=parent.pretrain_val, attacks=attacks,
                       wall_time_s=time.perf_counter() - t0, artifacts=dict(parent.artifacts))
    return _store(reg, record)


def _train_worker(args) -> str:
    cfg_dict, root = args
    return cli_train(ExperimentConfig.model_validate(cfg_dict), Registry(root))


def sweep(config, registry: Registry | str | None = None, workers: int = 1) -> str:
    """Train all 5 variants and return the run_id with the best validation OA (first wins ties)."""
    cfg = _as_config(config)
    reg = registry if isinstance(registry, Registry) else Registry(registry)
    variants = sweep_variants(cfg)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            ids = list(pool.map(_train_worker, [(v.canonical(), str(reg.root)) for v in variants]))
    else:
        ids = [cli_train(v, reg) for v in variants]
    best, best_oa = ids[0], reg.get(ids[0]).pretrain_val.OA
    for rid in ids[1:]:
        oa = reg.get(rid).pretrain_val.OA
        if oa > best_oa:
            best, best_oa = rid, oa
    return best
