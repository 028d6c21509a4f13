import sys
import pytest
import torch

from ntlbench.core import LabeledDataset, build_model
from ntlbench.data import ShiftSpec, make_domain_pair, split_pair, synthesize_glyphs

TINY_ARCH = {"channels": [4, 8], "image_size": 16, "in_channels": 3, "num_classes": 10}


class ConstantModel(torch.nn.Module):
    """Emits fixed logits regardless of input."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(len(x), -1)


@pytest.fixture(scope="session")
def tiny_glyphs():
    return synthesize_glyphs(n=200, seed=0, image_size=16)


@pytest.fixture
def tiny_ps(tiny_glyphs):
    pair = make_domain_pair(tiny_glyphs, [ShiftSpec(kind="rotation", magnitude=0.6),
                                          ShiftSpec(kind="color_invert", magnitude=0.6)], seed=0)
    return split_pair(pair, 0)


@pytest.fixture
def tiny_model():
    return build_model(TINY_ARCH, seed=0)


def random_dataset(n=40, c=3, size=8, classes=4, seed=0, role="source"):
    g = torch.Generator().manual_seed(seed)
    return LabeledDataset(torch.rand(n, c, size, size, generator=g), torch.arange(n) % classes, classes,
                          role=role)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
