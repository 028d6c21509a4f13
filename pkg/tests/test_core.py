import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstantModel, random_dataset
from ntlbench.core import (DEFAULT_ARCH, DomainPair, LabeledDataset, Metrics, RunConfig, batch_indices,
                           build_model, evaluate_accuracy, make_scheduler, make_optimizer, overall_score,
                           parameter_checksum, predict)


class OracleModel(torch.nn.Module):
    """Returns a huge logit on the true label, looked up from the image's first pixel."""

    def __init__(self, num_classes):
        super().__init__()
        self.c = num_classes

    def forward(self, x):
        y = x[:, 0, 0, 0].round().long()
        return torch.nn.functional.one_hot(y, self.c).float() * 100


def test_overall_score_examples():
    assert overall_score(83.9, 9.9) == 87.0
    assert overall_score(100, 0) == 100.0
    assert overall_score(50, 50) == 50.0


@pytest.mark.parametrize("sa,ta", [(-0.1, 0), (0, 100.1), (101, 5)])
def test_overall_score_range(sa, ta):
    with pytest.raises(ValueError, match="percentage out of range"):
        overall_score(sa, ta)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100))
def test_overall_score_monotone(a, b, t):
    lo, hi = sorted((a, b))
    assert overall_score(lo, t) <= overall_score(hi, t)
    assert overall_score(t, lo) >= overall_score(t, hi)


def test_metrics_oa_invariant():
    m = Metrics(81.7, 44.3)
    assert m.OA == (81.7 + (100 - 44.3)) / 2


def test_accuracy_perfect_classifier():
    n = 30
    images = torch.zeros(n, 1, 4, 4)
    labels = torch.arange(n) % 10
    images[:, 0, 0, 0] = labels.float()
    ds = LabeledDataset(images, labels, 10)
    assert evaluate_accuracy(OracleModel(10), ds, range(n)) == 100.0


def test_accuracy_constant_classifier():
    ds = random_dataset(n=100, classes=10)
    logits = torch.zeros(10)
    logits[0] = 1.0
    assert evaluate_accuracy(ConstantModel(logits), ds, range(100)) == 10.0


def test_accuracy_uniform_output_ties_to_class_zero():
    g = torch.Generator().manual_seed(0)
    labels = torch.randint(0, 10, (137,), generator=g)
    ds = LabeledDataset(torch.rand(137, 1, 4, 4, generator=g), labels, 10)
    split = torch.randperm(137, generator=g)[:90].tolist()
    expected = 100.0 * sum(1 for i in split if labels[i] == 0) / len(split)
    assert evaluate_accuracy(ConstantModel(torch.zeros(10)), ds, split) == expected


def test_accuracy_errors():
    ds = random_dataset(classes=4)
    with pytest.raises(ValueError, match="empty evaluation split"):
        evaluate_accuracy(ConstantModel(torch.zeros(4)), ds, [])
    with pytest.raises(ValueError, match="class-count mismatch"):
        evaluate_accuracy(ConstantModel(torch.zeros(5)), ds, [0, 1])


def test_accuracy_permutation_invariant_and_bounded():
    ds = random_dataset(n=50, c=3, size=16, classes=10)
    m = build_model({"channels": [4], "image_size": 16}, seed=1)
    split = list(range(50))
    a = evaluate_accuracy(m, ds, split)
    b = evaluate_accuracy(m, ds, split[::-1])
    assert a == b and 0 <= a <= 100


def test_accuracy_does_not_count_as_read():
    ds = random_dataset(classes=10, c=3, size=16)
    evaluate_accuracy(build_model({"channels": [4], "image_size": 16}), ds, range(10))
    assert sum(ds.reads.values()) == 0


def test_predict_tie_break():
    logits = torch.tensor([0.0, 1.0, 1.0, 0.5])
    assert predict(ConstantModel(logits), torch.zeros(3, 1, 2, 2)).tolist() == [1, 1, 1]


def test_model_bundle_probs_and_disjoint_params():
    m = build_model(seed=0)
    x = torch.rand(4, 3, 32, 32)
    p = m.probs(x)
    assert (p >= 0).all() and torch.allclose(p.sum(-1), torch.ones(4), atol=1e-5)
    phi_ids = {id(t) for t in m.phi_parameters()}
    omega_ids = {id(t) for t in m.omega_parameters()}
    assert phi_ids.isdisjoint(omega_ids)
    assert len(phi_ids) + len(omega_ids) == len(list(m.parameters()))


def test_default_arch():
    m = build_model()
    convs = [l for l in m.phi if isinstance(l, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == DEFAULT_ARCH["channels"] == [32, 64, 128]
    assert isinstance(m.omega, torch.nn.Linear)


@pytest.mark.contract
def test_build_model_deterministic_and_clone_independent():
    a, b = build_model(seed=3), build_model(seed=3)
    assert parameter_checksum(a) == parameter_checksum(b)
    c = a.clone()
    with torch.no_grad():
        next(c.parameters()).add_(1.0)
    assert parameter_checksum(a) == parameter_checksum(b)


def test_reset_omega_changes_only_head():
    m = build_model(seed=0)
    phi_before = parameter_checksum(m.phi)
    omega_before = parameter_checksum(m.omega)
    m.reset_omega(torch.Generator().manual_seed(9))
    assert parameter_checksum(m.phi) == phi_before
    assert parameter_checksum(m.omega) != omega_before


def test_domain_pair_shape_check():
    a = random_dataset(size=8)
    b = random_dataset(size=4)
    with pytest.raises(ValueError, match="shape mismatch"):
        DomainPair(a, b, 4)


@pytest.mark.contract
def test_dataset_reads_and_unlabeled_view():
    ds = random_dataset()
    ds.take([0, 1, 2])
    view = ds.unlabeled([5, 6, 7, 8])
    assert len(view) == 4
    view.take_images([0, 1])
    assert ds.reads["images"] == 5 and ds.reads["labels"] == 3
    assert not hasattr(view, "take")


def test_run_config_validation():
    with pytest.raises(Exception):
        RunConfig(learning_rate=0)
    with pytest.raises(Exception):
        RunConfig(**{"lambda": -1})
    with pytest.raises(Exception):
        RunConfig(clamp_bound=0)
    with pytest.raises(Exception):
        RunConfig(optimizer_name="rmsprop")
    assert RunConfig(**{"lambda": 0.5}).lambda_ == 0.5


def test_batch_indices_cover_split():
    g = torch.Generator().manual_seed(0)
    batches = batch_indices(range(10, 33), 5, g)
    assert sorted(torch.cat(batches).tolist()) == list(range(10, 33))
    assert [len(b) for b in batches] == [5, 5, 5, 5, 3]


def test_cosine_schedule_and_optimizers():
    m = build_model({"channels": [4], "image_size": 8, "in_channels": 1})
    opt = make_optimizer(m.parameters(), "sgd", 0.1)
    sched = make_scheduler(opt, RunConfig(epochs=4, lr_schedule="cosine"))
    for _ in range(4):
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] == pytest.approx(0.0, abs=1e-12)
    assert make_scheduler(opt, RunConfig()) is None
    with pytest.raises(ValueError):
        make_optimizer(m.parameters(), "lbfgs", 0.1)
