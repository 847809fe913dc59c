"""Shared assertions and tiny builders for the test suite."""

import numpy as np

from dualebm.autodiff import Parameter


def assert_grads_match(analytic, numeric, rtol, floor=0.01):
    """Per-coordinate |a - f| / max(floor, |a|, |f|) < rtol for every param.

    The floor turns the bound into an absolute one for vanishing gradients,
    where plain relative error would only measure finite-difference noise.
    """
    assert set(analytic) == set(numeric)
    for name in analytic:
        a = np.asarray(analytic[name])
        f = np.asarray(numeric[name])
        assert a.shape == f.shape, name
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(f)))
        err = np.abs(a - f) / denom
        assert err.max() < rtol, f"{name}: worst error {err.max():.3e} >= {rtol}"


def param(values, name="p"):
    return Parameter(np.asarray(values, dtype=np.float64), name)


def grads_of(params):
    return {p.name: p.grad.copy() for p in params}
