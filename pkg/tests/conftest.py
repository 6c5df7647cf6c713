"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import sys

import numpy as np
import pytest

from qecredteam import autodiff as ad
from qecredteam.codesim import NoiseModel, generate

FD_EPS = 1e-4
FD_FLOOR = 1e-6


def max_relative_error(loss_fn, tensors, eps: float = FD_EPS) -> float:
    """Worst |analytic - central difference| / max(|analytic|, |numeric|, floor).

    ``loss_fn()`` must rebuild the graph from the current ``.data`` of every
    tensor in ``tensors`` and return a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    ad.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        base = t.data.copy()
        numeric = np.zeros(t.shape)
        for idx in np.ndindex(*t.shape):
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped[idx] += sign * eps
                bumped.setflags(write=False)
                t.data = bumped
                with ad.no_grad():
                    numeric[idx] += sign * loss_fn().item()
            numeric[idx] /= 2 * eps
        base.setflags(write=False)
        t.data = base
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


@pytest.fixture(scope="session")
def repcode_small():
    return generate(NoiseModel(), 600, seed=11)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS):
        terminalreporter.write_line(line)
