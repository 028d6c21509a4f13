import math

import pytest
import torch

from conftest import random_dataset
from ntlbench.auxgen import (TRANSNTL_OPS, AugmentationSpec, apply_op, blur, build_auxiliary_domain,
                             identity_perturbation, make_cuti_style_batch, perturbation_set, rotate,
                             strong_augment)

OPS = ["gaussian_noise", "gaussian_blur", "solarize", "sharpness", "color_invert", "rotation", "contrast"]


@pytest.fixture
def batch():
    return torch.rand(6, 3, 12, 12, generator=torch.Generator().manual_seed(0))


@pytest.mark.parametrize("op", OPS)
def test_zero_magnitude_is_identity(op, batch):
    assert torch.equal(apply_op(op, batch, 0.0), batch)


@pytest.mark.parametrize("op", OPS)
def test_ops_keep_shape_and_range(op, batch):
    out = apply_op(op, batch, 0.8, torch.Generator().manual_seed(1))
    assert out.shape == batch.shape
    assert out.min() >= 0 and out.max() <= 1


def test_unknown_op_and_bad_magnitude(batch):
    with pytest.raises(ValueError, match="unknown"):
        apply_op("posterize", batch, 0.5)
    with pytest.raises(ValueError):
        apply_op("contrast", batch, 1.5)
    with pytest.raises(Exception):
        AugmentationSpec(ops=["posterize"])
    with pytest.raises(Exception):
        AugmentationSpec(ops=[])


def test_color_invert_involution(batch):
    spec = AugmentationSpec(ops=["color_invert"], magnitude=1.0, ops_per_sample=1)
    twice = strong_augment(strong_augment(batch, spec, 0), spec, 1)
    torch.testing.assert_close(twice, batch, atol=1e-6, rtol=0)


def test_strong_augment_magnitude_zero(batch):
    spec = AugmentationSpec(magnitude=0.0)
    assert torch.equal(strong_augment(batch, spec, 3), batch)


@pytest.mark.contract
def test_strong_augment_deterministic(batch):
    spec = AugmentationSpec(ops=OPS, magnitude=0.6, ops_per_sample=3)
    a, b = strong_augment(batch, spec, 7), strong_augment(batch, spec, 7)
    assert torch.equal(a, b)
    assert not torch.equal(a, strong_augment(batch, spec, 8))


def test_scaling_table_values(batch):
    # contrast at m=0.5 scales deviations from the per-image mean by 0.6
    mean = batch.mean(dim=(1, 2, 3), keepdim=True)
    torch.testing.assert_close(apply_op("contrast", batch, 0.5), (mean + 0.6 * (batch - mean)).clamp(0, 1))
    torch.testing.assert_close(apply_op("color_invert", batch, 0.25), 0.75 * batch + 0.25 * (1 - batch))
    torch.testing.assert_close(apply_op("solarize", batch, 0.3), torch.where(batch > 0.7, 1 - batch, batch))
    torch.testing.assert_close(apply_op("gaussian_blur", batch, 0.5), blur(batch, 1.0))


def test_gaussian_noise_std(batch):
    x = torch.full((200, 1, 16, 16), 0.5)
    out = apply_op("gaussian_noise", x, 0.5, torch.Generator().manual_seed(0))
    assert (out - x).std().item() == pytest.approx(0.15, rel=0.05)


def test_rotate_quarter_turns_exact(batch):
    assert torch.equal(rotate(rotate(batch, 90), 90), torch.rot90(batch, 2, dims=(2, 3)))
    assert torch.equal(rotate(batch, 360), batch)


def test_rotate_small_angle_preserves_constant_image():
    x = torch.full((2, 1, 9, 9), 0.3)
    torch.testing.assert_close(rotate(x, 17.0), x)


# ---------------------------------------------------------------- CUTI style


def test_cuti_style_zero_noise_is_identity(batch):
    torch.testing.assert_close(make_cuti_style_batch(batch, 0.0), batch, atol=1e-5, rtol=0)


def test_cuti_style_statistics_match_targets():
    x = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(2)) * 0.5 + 0.25
    _, styled, mu, sigma = make_cuti_style_batch(x, 0.1, torch.Generator().manual_seed(3), return_stats=True)
    flat = styled.reshape(4, 3, -1)
    torch.testing.assert_close(flat.mean(-1), mu, atol=1e-5, rtol=0)
    torch.testing.assert_close(flat.std(-1, unbiased=False), sigma, atol=1e-5, rtol=1e-4)


@pytest.mark.contract
def test_cuti_style_range_and_determinism(batch):
    a = make_cuti_style_batch(batch, 0.5, torch.Generator().manual_seed(0))
    b = make_cuti_style_batch(batch, 0.5, torch.Generator().manual_seed(0))
    assert torch.equal(a, b)
    assert a.min() >= batch.min() and a.max() <= batch.max()
    with pytest.raises(ValueError):
        make_cuti_style_batch(batch[:0], 0.5)


# -------------------------------------------------------------- aux domains


def test_aux_domain_degenerate_and_label_preserving():
    src = random_dataset(n=30, c=3, size=8, classes=5)
    aux = build_auxiliary_domain(src, "strong_augment", {"magnitude": 0.0}, seed=0)
    assert torch.equal(aux._images, src._images)
    assert aux.label_histogram() == src.label_histogram()
    assert aux.role == "auxiliary" and aux.meta["provenance"] == "auxiliary"
    cuti = build_auxiliary_domain(src, "cuti_style", {"noise_std": 0.4}, seed=1)
    assert cuti.label_histogram() == src.label_histogram() and len(cuti) == len(src)
    assert not torch.equal(cuti._images, src._images)


@pytest.mark.contract
def test_aux_domain_deterministic():
    src = random_dataset(n=20, c=3, size=8)
    a = build_auxiliary_domain(src, "strong_augment", {"magnitude": 0.7}, seed=4)
    b = build_auxiliary_domain(src, "strong_augment", {"magnitude": 0.7}, seed=4)
    assert a.checksum() == b.checksum()
    with pytest.raises(ValueError):
        build_auxiliary_domain(src, "gan", {}, seed=0)


# --------------------------------------------------------------- perturbations


def test_perturbation_set_contract(batch):
    ps = perturbation_set("transntl_default", 0.2)
    assert [p.op for p in ps] == list(TRANSNTL_OPS) == ["gaussian_noise", "gaussian_blur", "contrast", "rotation"]
    assert all(p.magnitude == 0.2 for p in ps)
    for p in ps:
        assert p(batch, torch.Generator().manual_seed(0)).shape == batch.shape
    with pytest.raises(ValueError):
        perturbation_set("transntl_default", 0.0)
    with pytest.raises(ValueError):
        perturbation_set("other", 0.2)
    assert torch.equal(identity_perturbation()(batch), batch)
