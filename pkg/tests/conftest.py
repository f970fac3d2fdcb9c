"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest
import torch

from uniav.data import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """8-class, 4-per-class corpus for fast structural tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    spec = SyntheticSpec(n_classes=8, samples_per_class=4, seed=101)
    generate_synthetic(spec, root)
    return root / "manifest.jsonl"


@pytest.fixture(scope="session")
def small_train_corpus(tmp_path_factory):
    """Corpus big enough for short end-to-end training runs."""
    root = tmp_path_factory.mktemp("small_train_corpus")
    spec = SyntheticSpec(n_classes=8, samples_per_class=40, seed=202)
    generate_synthetic(spec, root)
    return root / "manifest.jsonl"


def fd_gradient(fn, tensors, eps: float = 1e-6):
    """Central finite differences of a scalar fn wrt a list of float64
    tensors; returns one gradient array per tensor."""
    grads = []
    for t in tensors:
        g = np.zeros(t.numel())
        flat = t.view(-1)
        for i in range(t.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g.reshape(tuple(t.shape)))
    return grads


def check_gradients(fn, tensors, rtol: float = 1e-4) -> float:
    """Compare autograd against central differences.

    fn must rebuild the scalar loss from `tensors` on every call. Returns
    the worst per-tensor relative error (norm of the difference over norm
    of the FD gradient, with a floor for tiny gradients).
    """
    for t in tensors:
        assert t.dtype == torch.float64, "gradient checks must run in float64"
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad.detach().numpy().copy() for t in tensors]
    with torch.no_grad():
        fd = fd_gradient(fn, tensors)
    worst = 0.0
    for a, f in zip(analytic, fd):
        denom = max(np.linalg.norm(f), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - f) / denom))
    assert worst < rtol, f"gradient mismatch: relative error {worst:.3e}"
    return worst
