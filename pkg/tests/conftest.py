import numpy as np
import pytest

from fastmim import tensor as T

ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    ACCEPTANCE_RESULTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def numeric_grad(forward, arr, h=1e-5, coords=None):
    """Central-difference gradient of the scalar forward() w.r.t. arr.

    Mutates arr in place around each probed coordinate.  coords limits the
    probe to a subset of flat indices (full sweep when None).
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    grad = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: dict) -> float:
    """max over probed coords of |a - n| / max(1, |a|, |n|)."""
    a = analytic.reshape(-1)
    worst = 0.0
    for i, n in numeric.items():
        denom = max(1.0, abs(a[i]), abs(n))
        worst = max(worst, abs(a[i] - n) / denom)
    return worst


def gradcheck_scalar(build, params, h=1e-5, tol=1e-3, coords_per_param=None,
                     rng=None):
    """Check build() -> scalar Tensor against central differences for every
    Tensor in params.  Must run under float64."""
    loss = build()
    T.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    T.zero_grads(params)

    def forward():
        return float(build().data)

    worst = 0.0
    for p in params:
        if coords_per_param is None or p.size <= coords_per_param:
            coords = None
        else:
            coords = sorted(rng.choice(p.size, size=coords_per_param, replace=False))
        num = numeric_grad(forward, p.data, h=h, coords=coords)
        worst = max(worst, max_rel_err(analytic[id(p)], num))
    assert worst < tol, f"max relative gradient error {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
