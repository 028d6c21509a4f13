"""Directional desk-scale runs for individual pipelines.

These reuse the models from ``desk`` and check the direction and rough size
of each method's effect on the rotated/inverted glyph pair.
"""
import torch

import desk
from ntlbench import auxgen
from ntlbench.core import build_model, evaluate_accuracy, evaluate_pair
from ntlbench.methods import MethodSpec, train_dso, train_source_only

DSO = MethodSpec(name="dso", objective=desk.OBJECTIVE, method_params={"epsilon": 0.25, "warmup_epochs": 4})
SOURCE_ONLY = MethodSpec(name="source_only_wrapper", objective=desk.OBJECTIVE,
                         method_params={"strategy": "strong_augment", "magnitude": 0.8, "warmup_epochs": 4})


def test_dso_degrades_unseen_shift():
    ps = desk.splits()
    model, hist = train_dso(build_model(desk.ARCH, 0), (ps.pair.source, ps.source.train), DSO, desk.run_config(0),
                            ps.source.val, forbidden=(ps.pair.target,))
    dso, sl = evaluate_pair(model, ps), desk.metrics("sl", 0)
    assert hist.provenance["target"] == {"images": 0, "labels": 0}
    assert dso.TA <= sl.TA - 20, (dso, sl)
    assert dso.SA >= sl.SA - 8, (dso, sl)


def test_source_only_ntl_below_sl_on_real_shift():
    ps = desk.splits()
    model, _ = train_source_only(build_model(desk.ARCH, 0), ps.pair.source, ps.source.train, SOURCE_ONLY,
                                 desk.run_config(0), ps.source.val)
    src_only, sl = evaluate_pair(model, ps), desk.metrics("sl", 0)
    assert src_only.TA <= sl.TA - 10, (src_only, sl)


def test_perturbation_set_is_slight_for_sl():
    ps = desk.splits()
    sl = desk.trained("sl", 0)
    x, y = ps.pair.source.take(ps.source.val)
    clean = evaluate_accuracy(sl, ps.pair.source, ps.source.val)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        accs = [100.0 * (sl(p(x, g)).argmax(-1) == y).float().mean().item()
                for p in auxgen.perturbation_set("transntl_default", 0.2)]
    drops = [clean - a for a in accs]
    assert sum(drops) / len(drops) > 0
    assert max(drops) < 30


def test_transntl_recovers_target_keeping_source():
    row = desk.battery("ntl", 0, desk.basic("source_ft") + (desk.TRANSNTL,))["SourceFT/transntl"]
    assert row.deltas["TA"] >= 20
    assert row.deltas["SA"] >= -5


def test_targetft_direct_all_recovers_ntl():
    row = desk.battery("ntl", 0, desk.STRONG_TARGET_FT)["TargetFT/direct_all"]
    assert row.deltas["TA"] >= 20, row


def test_sophon_resists_direct_fc_where_ntl_does_not():
    flags = []
    for s in desk.SEEDS:
        sop = desk.battery("sophon", s, desk.STRONG_TARGET_FT)["TargetFT/direct_FC"]
        ntl = desk.battery("ntl", s, desk.STRONG_TARGET_FT)["TargetFT/direct_FC"]
        flags.append(sop.pre.TA <= 30 and sop.deltas["TA"] < 10 and ntl.deltas["TA"] >= 20)
    assert sum(flags) >= 2, flags


def test_shot_recovers_ntl_target():
    row = desk.battery("ntl", 0, (desk.SHOT,))["SFDA/shot"]
    assert row.provenance["target"]["labels"] == 0
    assert row.deltas["TA"] >= 10, row
