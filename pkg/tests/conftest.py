import numpy as np
import pytest
import torch

from mfas.data import generate_toy_dataset, load_manifest
from mfas.encoder import EncoderConfig


def finite_difference_error(fn, inputs, eps=1e-6):
    """Max relative error between autograd and central differences of sum(fn * w).

    A fixed random projection ``w`` turns a tensor output into a scalar so that
    every output element contributes to the check.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    w = torch.randn(out.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(1234))
    scalar = lambda: (fn(*inputs) * w).sum()
    grads = torch.autograd.grad(scalar(), inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = scalar().item()
            flat[i] = orig - eps
            minus = scalar().item()
            flat[i] = orig
            num.view(-1)[i] = (plus - minus) / (2 * eps)
        scale = max(num.abs().max().item(), g.abs().max().item(), 1e-8)
        worst = max(worst, (num - g).abs().max().item() / scale)
    return worst


@pytest.fixture
def tiny_cfg():
    return EncoderConfig.tiny(conv_channels=8, model_dim=16, ffn_dim=32, n_heads=2, n_layers=4)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    generate_toy_dataset(d, n_utterances=40, seed=3, long_prob=0.2)
    return d


@pytest.fixture(scope="session")
def toy_records(toy_dir):
    return load_manifest(toy_dir / "manifest.jsonl")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion; returns the ok flag."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
