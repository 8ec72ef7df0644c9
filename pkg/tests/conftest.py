import time

import numpy as np
import pytest
import torch


def central_fd(f, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(f(x))
            flat[i] = orig - step
            fm = float(f(x))
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
    return grad


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    f(x).backward()
    return x.grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Relative L2 distance, normalized by the larger norm."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_splits():
    """The 200/50 synthetic train/val split used by the end-to-end checks."""
    from advtee.data import synth_splits

    return synth_splits(200, 50, seed=0)


@pytest.fixture(scope="session")
def trained_detector(desk_splits):
    """Toy detector trained once per session on the desk split (about 2 minutes on one core)."""
    from advtee.detector import train_toy_detector

    torch.set_num_threads(1)
    train, val = desk_splits
    start = time.perf_counter()
    adapter = train_toy_detector(train, seed=0, val=val, min_ap=0.0)
    adapter.train_seconds = time.perf_counter() - start
    return adapter


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
