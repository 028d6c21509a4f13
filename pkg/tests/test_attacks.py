import pytest
import torch
import torch.nn.functional as F

from ntlbench.attacks import (AttackSpec, attack_subset, finetune_attack, information_maximization,
                              run_attack, run_threat_battery, shot_attack, shot_pseudo_labels,
                              transntl_attack)
from ntlbench.auxgen import perturbation_set
from ntlbench.core import ProvenanceError, evaluate_pair, parameter_checksum

SPEC = AttackSpec(family="target_ft", strategy="direct_all", epochs=2, learning_rate=1e-3,
                  optimizer_name="adam", batch_size=16)


# ---------------------------------------------------------------- spec/subset


def test_spec_family_compatibility():
    with pytest.raises(Exception, match="not allowed"):
        AttackSpec(family="target_ft", strategy="transntl")
    with pytest.raises(Exception, match="not allowed"):
        AttackSpec(family="source_ft", strategy="shot")
    with pytest.raises(Exception):
        AttackSpec(family="sfda", strategy="shot", budget_fraction=0.0)
    assert AttackSpec(family="sfda", strategy="shot").budget_fraction == 0.10


def test_spec_resolution_defaults():
    s = AttackSpec(family="source_ft", strategy="direct_all").resolved(1e-3, "sgd")
    assert s.learning_rate == pytest.approx(1e-4) and s.optimizer_name == "sgd"
    s = AttackSpec(family="source_ft", strategy="direct_all", learning_rate=0.5).resolved(1e-3, "sgd")
    assert s.learning_rate == 0.5


def test_attack_subset_examples():
    split = list(range(1000))
    sub = attack_subset(split, 0.1, seed=3)
    assert len(sub) == 100 == len(set(sub))
    assert sub == attack_subset(split, 0.1, seed=3)
    assert sub != attack_subset(split, 0.1, seed=4)
    assert attack_subset(split[::-1], 1.0, 0) == split
    with pytest.raises(ValueError, match="attack budget too small"):
        attack_subset(range(5), 0.1, 0)


# ---------------------------------------------------------------- fine-tuning


@pytest.mark.contract
@pytest.mark.parametrize("strategy", ["initFC_all", "initFC_FC", "direct_FC", "direct_all"])
def test_finetune_freeze_and_fresh_copy(strategy, tiny_ps, tiny_model):
    before = parameter_checksum(tiny_model)
    ds = tiny_ps.pair.target
    attacked = finetune_attack(tiny_model, (ds, tiny_ps.target.train[:40]), strategy, SPEC)
    assert parameter_checksum(tiny_model) == before
    same_phi = parameter_checksum(attacked.phi) == parameter_checksum(tiny_model.phi)
    assert same_phi == strategy.endswith("_FC")
    assert parameter_checksum(attacked.omega) != parameter_checksum(tiny_model.omega)
    assert all(p.requires_grad for p in attacked.parameters())


@pytest.mark.contract
def test_initfc_zero_epochs_is_fresh_head(tiny_ps, tiny_model):
    spec = SPEC.model_copy(update={"epochs": 0})
    attacked = finetune_attack(tiny_model, (tiny_ps.pair.target, tiny_ps.target.train), "initFC_FC", spec)
    assert parameter_checksum(attacked.phi) == parameter_checksum(tiny_model.phi)
    assert parameter_checksum(attacked.omega) != parameter_checksum(tiny_model.omega)
    assert evaluate_pair(attacked, tiny_ps).TA <= 35.0


def test_finetune_errors(tiny_ps, tiny_model):
    with pytest.raises(ValueError):
        finetune_attack(tiny_model, (tiny_ps.pair.target, []), "direct_all", SPEC)
    with pytest.raises(ValueError):
        finetune_attack(tiny_model, (tiny_ps.pair.target, [0, 1]), "transntl", SPEC)


# ------------------------------------------------------------------ TransNTL


@pytest.mark.contract
def test_transntl_reads_no_target(tiny_ps, tiny_model):
    spec = AttackSpec(family="source_ft", strategy="transntl", epochs=1, learning_rate=1e-3,
                      optimizer_name="adam")
    before = dict(tiny_ps.pair.target.reads)
    pset = perturbation_set("transntl_default", 0.2)
    attacked = transntl_attack(tiny_model, (tiny_ps.pair.source, tiny_ps.source.train[:32]), pset, spec)
    assert dict(tiny_ps.pair.target.reads) == before
    assert parameter_checksum(attacked) != parameter_checksum(tiny_model)
    with pytest.raises(ProvenanceError):
        transntl_attack(tiny_model, (tiny_ps.pair.target, tiny_ps.target.train[:32]), pset, spec)
    with pytest.raises(ValueError):
        transntl_attack(tiny_model, (tiny_ps.pair.source, tiny_ps.source.train[:32]), [], spec)


# ----------------------------------------------------------------------- SHOT


def test_pseudo_labels_match_brute_force():
    g = torch.Generator().manual_seed(0)
    feats = torch.randn(30, 5, generator=g, dtype=torch.float64)
    probs = torch.randn(30, 4, generator=g, dtype=torch.float64).softmax(-1)
    fa = torch.cat([feats, torch.ones(30, 1, dtype=torch.float64)], 1)
    fa = fa / fa.norm(dim=1, keepdim=True)
    cents = []
    for k in range(4):
        num = sum(probs[i, k] * fa[i] for i in range(30))
        cents.append(num / (1e-8 + probs[:, k].sum()))
    expected = []
    for i in range(30):
        d = [1 - float(fa[i] @ c / c.norm()) for c in cents]
        expected.append(min(range(4), key=lambda k: d[k]))
    assert shot_pseudo_labels(feats, probs).tolist() == expected


def test_information_maximization_values():
    confident_diverse = torch.eye(4) * 50
    assert information_maximization(confident_diverse).item() == pytest.approx(-torch.log(torch.tensor(4.)).item(),
                                                                              abs=1e-4)
    collapsed = torch.zeros(6, 4)
    collapsed[:, 0] = 50
    assert information_maximization(collapsed).item() == pytest.approx(0.0, abs=1e-4)
    uniform = torch.zeros(5, 4)
    assert information_maximization(uniform).item() == pytest.approx(0.0, abs=1e-6)


@pytest.mark.contract
def test_shot_freeze_and_label_blindness(tiny_ps, tiny_model):
    spec = AttackSpec(family="sfda", strategy="shot", epochs=2, learning_rate=1e-3, optimizer_name="adam")
    target = tiny_ps.pair.target
    before = dict(target.reads)
    attacked = shot_attack(tiny_model, target.unlabeled(tiny_ps.target.train[:40]), spec)
    assert parameter_checksum(attacked.omega) == parameter_checksum(tiny_model.omega)
    assert parameter_checksum(attacked.phi) != parameter_checksum(tiny_model.phi)
    assert target.reads["labels"] == before.get("labels", 0)
    with pytest.raises(ProvenanceError):
        shot_attack(tiny_model, target, spec)
    with pytest.raises(ValueError, match="insufficient adaptation data"):
        shot_attack(tiny_model, target.unlabeled([0, 1, 2]), spec)


# -------------------------------------------------------------------- battery


def _battery_specs():
    return [AttackSpec(family="source_ft", strategy="direct_FC", epochs=1, seed=1),
            AttackSpec(family="source_ft", strategy="transntl", epochs=1, seed=1),
            AttackSpec(family="target_ft", strategy="initFC_all", epochs=1, seed=1),
            AttackSpec(family="sfda", strategy="shot", epochs=1, seed=1)]


def test_battery_empty(tiny_ps, tiny_model):
    before = parameter_checksum(tiny_model)
    assert run_threat_battery(tiny_model, tiny_ps, []) == []
    assert parameter_checksum(tiny_model) == before


@pytest.mark.contract
def test_battery_fresh_copy_and_determinism(tiny_ps, tiny_model):
    before = parameter_checksum(tiny_model)
    a = run_threat_battery(tiny_model, tiny_ps, _battery_specs())
    b = run_threat_battery(tiny_model, tiny_ps, _battery_specs())
    assert parameter_checksum(tiny_model) == before
    assert len({(r.pre.SA, r.pre.TA) for r in a}) == 1
    assert [(r.pre, r.post) for r in a] == [(r.pre, r.post) for r in b]
    for r in a:
        assert r.deltas["TA"] == r.post.TA - r.pre.TA
    prov = {r.spec.strategy: r.provenance for r in a}
    assert prov["transntl"]["target"] == {"images": 0, "labels": 0}
    assert prov["shot"]["target"]["labels"] == 0 and prov["shot"]["target"]["images"] > 0


def test_run_attack_uses_budget(tiny_ps, tiny_model):
    src = tiny_ps.pair.source
    before = src.reads["images"]
    spec = AttackSpec(family="source_ft", strategy="direct_all", epochs=1, learning_rate=1e-4,
                      optimizer_name="adam")
    run_attack(tiny_model, tiny_ps, spec)
    assert src.reads["images"] - before == int(0.1 * len(tiny_ps.source.train))
