from pathlib import Path

import numpy as np
import pytest

from ego import io as eio
from ego.cli import DEFAULT_CHECKPOINT
from ego.denoiser import Condition, Denoiser
from ego.schedule import NoiseSchedule

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
TOY_CHECKPOINT = DEFAULT_CHECKPOINT


class EchoDenoiser:
    """Predicts a fixed noise tensor regardless of input or condition."""

    dtype = np.float64

    def __init__(self, eps):
        self.eps = np.asarray(eps, np.float64)

    def forward(self, x, t, cond):
        x = np.asarray(x)
        return np.broadcast_to(self.eps, x.shape).copy()


class InputDenoiser:
    """Returns its own input as the noise estimate (exact when x_t is pure noise)."""

    dtype = np.float64

    def forward(self, x, t, cond):
        return np.array(x, dtype=np.float64)


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule.linear()


def tiny_model(dtype=np.float64, seed=3, n_categories=4):
    m = Denoiser.create(n_categories, seed=seed, channels=(8, 16, 32), emb_dim=16, time_dim=8)
    rng = np.random.default_rng(seed + 100)
    # perturb norms and the zero-initialised biases so every path carries signal
    for k, v in m.params.items():
        if k.endswith(".b") or k.endswith(".g"):
            m.params[k] = (v + 0.1 * rng.standard_normal(v.shape)).astype(np.float32)
    return m.astype(dtype)


@pytest.fixture(scope="session")
def tiny64():
    return tiny_model(np.float64)


@pytest.fixture(scope="session")
def tiny32():
    return tiny_model(np.float32)


@pytest.fixture(scope="session")
def toy_model():
    if not TOY_CHECKPOINT.exists():
        pytest.skip("toy checkpoint missing")
    return Denoiser(eio.load_checkpoint(TOY_CHECKPOINT))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def cat(i):
    return Condition.category(i)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"[acceptance {number:>2}] {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
