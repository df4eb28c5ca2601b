import numpy as np
import pytest
import torch

from pseaec.models import tiny_config
from pseaec.scene import make_training_pool
from pseaec.train import TrainConfig, train

# acceptance summary lines, printed once at the end of the session
ACCEPTANCE = {}

OVERFIT_STEPS = 2000
OVERFIT_DELAY_FRAMES = 17


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def record_at():
    def record(key, ok, detail=""):
        line = f"{key} {'PASS' if ok else 'FAIL'}" + (f"  {detail}" if detail else "")
        ACCEPTANCE[key] = line
        print(line)
        return ok
    return record


def numeric_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar ``fn`` at double tensor ``x``."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_error(fn, tensors, h=1e-5):
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = numeric_grad(fn, t.detach(), h)
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
        worst = max(worst, (analytic - numeric).abs().max().item() / scale)
    return worst


@pytest.fixture(scope="session")
def overfit_pool():
    return make_training_pool(8, seed=1, duration=3.0, echo_delay=OVERFIT_DELAY_FRAMES * 160)


def overfit_config(out_dir):
    return TrainConfig(steps=OVERFIT_STEPS, batch_size=2, lr=3e-3, seed=0, model=tiny_config(),
                       out_dir=str(out_dir))


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory, overfit_pool):
    """One desk-scale training run shared by the slow acceptance tests."""
    out = tmp_path_factory.mktemp("overfit")
    ckpt = train(overfit_config(out), pool=overfit_pool)
    return out, ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
