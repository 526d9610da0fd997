import numpy as np
import pytest

from flowad import tensor as T


def central_diff_grad(f, x, h=1e-6):
    """Independent gradient oracle: central finite differences on a
    scalar-valued f evaluated at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    """Max elementwise relative error; exact agreement (incl. 0 vs 0) is 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    denom = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros_like(diff)
    nz = diff > 0
    out[nz] = diff[nz] / np.maximum(denom[nz], 1e-12)
    return out.max() if out.size else 0.0


def check_grad(build, x0, tol=1e-4, h=1e-6):
    """Compare autodiff gradient of scalar build(Tensor) against the
    central-difference oracle at x0."""
    t = T.Tensor(x0, requires_grad=True)
    out = build(t)
    out.backward()
    fd = central_diff_grad(lambda x: build(T.Tensor(x)).item(), np.array(x0, dtype=np.float64), h=h)
    err = rel_err(t.grad, fd)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
