import numpy as np
import pytest
from hypothesis import settings

from detgen.detectors import DetectorConfig, train_detectors
from detgen.flowgen import FlowModel
from detgen.numkit import Rng
from detgen.promptpolicy import PromptPolicy
from detgen.synthworld import SampleBatch, WorldSpec, sample_real_batch

settings.register_profile("detgen", deadline=None, max_examples=60)
settings.load_profile("detgen")

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def world():
    return WorldSpec()


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def tiny_stack():
    """Small but trained generator, detectors and policy shared by integration tests."""
    w = WorldSpec()
    r = Rng(7)
    flow = FlowModel.init(w, r.child("flow"), hidden=(16, 16))
    real = sample_real_batch(w, 600, r.child("real"))
    x = r.child("fake").normal(size=(600, 2)) * 3.0
    fake = SampleBatch(x, real.tokens, real.classes, "generated")
    cfg = DetectorConfig(steps=1500, align_steps=300, lr=1e-2, feature_hidden=(16,), heldout_hidden=(16, 16), align_hidden=(8,), n_anchors=64)
    suite = train_detectors(w, real, fake, cfg, r.child("det"))
    policy = PromptPolicy.init(w, r.child("policy"), emb_dim=4, hidden=(8,))
    return w, flow, suite, policy


def finite_difference(loss_fn, params, grads, rng, per_param=4, h=1e-6):
    """Max relative error between analytic ``grads`` and central differences."""
    worst = 0.0
    for name, arr in params.items():
        flat_idx = rng.child(name).integers(0, arr.size, size=per_param)
        for f in flat_idx:
            idx = np.unravel_index(int(f), arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            lp = loss_fn()
            arr[idx] = old - h
            lm = loss_fn()
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst
