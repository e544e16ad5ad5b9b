import numpy as np
import pytest
import torch


def fd_gradients(loss_fn, params, entries_per_param=3, h=1e-5, seed=0):
    """Autograd and central-difference gradients at a few random entries.

    ``loss_fn`` maps no arguments to a scalar tensor; ``params`` is a dict of
    named float64 tensors. Returns ``(analytic, numeric)`` as flat arrays.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    # an unused parameter has no grad; finite differences must then be zero too
    grads = {n: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for n, p in params.items()}
    analytic, numeric = [], []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            picks = rng.choice(flat.numel(), size=min(entries_per_param, flat.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
                analytic.append(grads[name].view(-1)[i].item())
    return np.array(analytic), np.array(numeric)


def fd_relative_error(loss_fn, params, **kw):
    """Normwise relative error ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)``."""
    a, n = fd_gradients(loss_fn, params, **kw)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Log one PASS/FAIL line; printed live and again in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
