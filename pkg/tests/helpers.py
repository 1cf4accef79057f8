"""Shared test utilities: finite-difference oracles and comparisons."""

import numpy as np


def finite_diff(f, x, eps=1e-4):
    """Central-difference gradient of scalar f with respect to array x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(x)
        x[idx] = orig - eps
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return grad


def rel_err(a, b, floor=1e-8):
    """Elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = (err / denom).max()
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e}"


def small_field_config(seed=0):
    """A tiny field configuration that keeps tests fast."""
    from sdfseg.fields import FieldConfig
    from sdfseg.hashgrid import HashGridConfig

    grid = HashGridConfig(levels=4, features_per_level=2, table_size=2 ** 12,
                          n_min=4, n_max=32)
    return FieldConfig(fg_grid=grid, bg_grid=grid, seed=seed)
