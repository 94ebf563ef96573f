import pytest
import torch

from garmentedit.backends import toy_stack
from garmentedit.core import LatentCode


def central_difference_check(fn, x, probes=10, h=1e-6, seed=0):
    """Compare autograd against central differences along random directions.

    Returns the worst relative error over ``probes`` directions."""
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(probes):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64)
        v = v / v.norm()
        with torch.no_grad():
            fd = (fn(x + h * v) - fn(x - h * v)) / (2 * h)
        an = (grad * v).sum()
        denom = max(abs(float(fd)), abs(float(an)), 1e-8)
        worst = max(worst, abs(float(fd - an)) / denom)
    return worst


@pytest.fixture(scope="session")
def stack64():
    """Frozen float64 toy stack; gradients flow only to test inputs."""
    b = toy_stack(dtype=torch.float64)
    for net in (b.generator, b.identity, b.perceptual):
        net.requires_grad_(False)
    return b


@pytest.fixture(scope="session")
def stack32():
    return toy_stack()


@pytest.fixture
def code64():
    g = torch.Generator().manual_seed(7)
    return LatentCode(torch.randn(18, 16, generator=g, dtype=torch.float64) * 0.5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
