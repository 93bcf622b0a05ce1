"""Central finite-difference oracle for gradient verification.

This is the independent route against which the analytic backward pass is
checked everywhere in the test suite: it only ever calls the forward pass,
so a bug in a backward closure cannot hide in it.
"""

from __future__ import annotations

import numpy as np

from .tensor import GradMode, Tensor, forward_op, no_grad


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def finite_difference_check(fn, params, step=1e-5, max_probes_per_param=None, rng=None):
    """Return the max relative error between analytic and numeric gradients.

    ``fn(params) -> scalar Tensor`` is evaluated once with gradients to
    collect the analytic values, then re-evaluated under central differences
    f(x+h), f(x-h) for each probed coordinate. With
    ``max_probes_per_param`` set, a seeded subset of coordinates per
    parameter is probed instead of all of them (the full render pipeline has
    tens of thousands of weights).

    The error measure is |analytic - numeric| / max(1, |numeric|).
    """
    rng = rng or np.random.default_rng(0)
    loss = fn(params)
    loss.backward()
    analytic = {name: (None if p.grad is None else p.grad.copy()) for name, p in params.items()}
    for p in params.values():
        p.grad = None

    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            if max_probes_per_param is not None and n > max_probes_per_param:
                coords = rng.choice(n, size=max_probes_per_param, replace=False)
            else:
                coords = range(n)
            a = np.zeros(p.data.shape).reshape(-1) if analytic[name] is None else analytic[name].reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                hi = fn(params).item()
                flat[c] = orig - step
                lo = fn(params).item()
                flat[c] = orig
                numeric = (hi - lo) / (2.0 * step)
                worst = max(worst, relative_error(a[c], numeric))
    return worst


def _op_inputs(kind, rng):
    """Random, well-conditioned inputs for one op kind."""
    a = Tensor(rng.uniform(-2.0, 2.0, size=(3, 5)), requires_grad=True)
    if kind in ("div",):
        b = Tensor(rng.uniform(0.5, 2.0, size=(3, 5)) * np.sign(rng.uniform(-1, 1, size=(3, 5))), requires_grad=True)
        return [a, b]
    if kind in ("add", "sub", "mul", "concat", "stack"):
        return [a, Tensor(rng.uniform(-2.0, 2.0, size=(3, 5)), requires_grad=True)]
    if kind == "matmul":
        return [a, Tensor(rng.uniform(-1.0, 1.0, size=(5, 4)), requires_grad=True)]
    if kind in ("sqrt", "pow", "norm"):
        return [Tensor(rng.uniform(0.5, 3.0, size=(3, 5)), requires_grad=True)]
    if kind == "abs":
        # keep probes away from the kink at 0
        return [Tensor(rng.uniform(0.5, 2.0, size=(3, 5)) * rng.choice([-1.0, 1.0], size=(3, 5)), requires_grad=True)]
    if kind == "max":
        # well-separated values so the finite-difference step cannot flip the argmax
        vals = rng.permuted(np.linspace(-2.0, 2.0, 15).reshape(3, 5), axis=1)
        return [Tensor(vals, requires_grad=True)]
    return [a]


def check_op(kind, probes=100, step=1e-5, seed=0):
    """Gradient-check one op kind at `probes` random input draws; returns max error."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    draws = max(1, -(-probes // 15))  # each draw probes every coordinate of a 3x5 input
    for _ in range(draws):
        inputs = _op_inputs(kind, rng)
        with no_grad():
            out_size = forward_op(kind, inputs).size
        proj = Tensor(rng.uniform(-1.0, 1.0, size=out_size))

        def fn(params, inputs=inputs, proj=proj):
            # reduce to a scalar through a fixed random projection
            return (forward_op(kind, inputs).reshape(-1) * proj).sum()

        params = {f"in{i}": t for i, t in enumerate(inputs)}
        worst = max(worst, finite_difference_check(fn, params, step=step))
    return worst


def check_all_ops(step=1e-5, seed=0):
    """Run check_op over every registered op kind; returns {kind: max_rel_err}."""
    from .tensor import OP_TABLE

    return {kind: check_op(kind, step=step, seed=seed) for kind in OP_TABLE}


def assert_gradmode_restored():
    assert GradMode.enabled, "grad mode left disabled"
