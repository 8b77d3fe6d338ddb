import numpy as np
import pytest

from metaprune.tensor import Tensor

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def grad_error(analytic, numeric, rtol=1e-4, atol=1e-7) -> float:
    """Worst elementwise relative error, with |n| floored at atol / rtol.

    A value below rtol means every element satisfies |a - n| <= max(rtol * |n|, atol).
    """
    denom = np.maximum(np.abs(numeric), atol / rtol)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def check_op(op, arrays, rng, h=1e-5):
    """Worst relative error between autodiff and central differences for ``sum(op(*xs) * R)``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)
    (out * Tensor(proj)).sum().backward()
    analytic = [t.grad for t in tensors]

    def f():
        return float(np.sum(op(*[Tensor(a) for a in arrays]).data * proj))

    numeric = numeric_grad(f, arrays, h)
    return max(grad_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
