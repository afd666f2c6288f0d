import numpy as np
import pytest


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    """Direct sliding-window summation, one output value at a time."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for ch in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, ch, r * stride + dy, c * stride + dx] * w[o, ch, dy, dx]
                    out[i, o, r, c] = acc + (b[o] if b is not None else 0.0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line for the terminal summary."""

    def record(number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
