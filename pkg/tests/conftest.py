import numpy as np
import pytest

from mtelab import autodiff as ad
from mtelab.nn import ModelSpec, init_params, logits_graph

_CRITERIA: list[tuple[str, bool, str]] = []


def micro_net(tape, seed, k=3, d=4, hidden=5, batch=6):
    """Random 2-layer net on ``tape``; returns (log-prob node, param nodes, x)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, d))
    ckpt = init_params(ModelSpec((d, hidden, k), init_seed=seed))
    # non-zero biases so every parameter carries gradient
    ckpt = type(ckpt)(ckpt.spec, ckpt.params + 0.1 * rng.normal(size=ckpt.params.size))
    logits, params = logits_graph(tape, ckpt, x)
    return ad.log_softmax(logits), params, x


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion outcome for the terminal summary."""

    def record(label: str, ok: bool, detail: str = ""):
        _CRITERIA.append((label, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}  {detail}")
