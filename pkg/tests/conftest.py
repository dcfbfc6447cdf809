import numpy as np
import pytest

import stsens.model as model_mod
from stsens.data import SynthConfig, generate_synthetic

_mha = model_mod.interpretable_mha


def _checked_mha(*args, **kwargs):
    out, attn = _mha(*args, **kwargs)
    w = attn.data
    if not np.all(np.isfinite(w)):
        return out, attn  # the network's own finite check reports this
    assert np.all(np.triu(w, 1) == 0.0), "attention reaches a later position"
    assert np.allclose(w.sum(-1), 1.0, atol=1e-6), "attention row does not sum to 1"
    return out, attn


@pytest.fixture(autouse=True)
def attention_invariants(monkeypatch):
    """Every forward pass in the suite checks causality and row normalisation."""
    monkeypatch.setattr(model_mod, "interpretable_mha", _checked_mha)


@pytest.fixture
def small_panel():
    return generate_synthetic(SynthConfig(counties=4, days=60, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report(request):
    """Record one acceptance line; the summary is printed at the end of the run."""
    results = request.config.__dict__.setdefault("_acceptance", {})

    def _report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        results[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
