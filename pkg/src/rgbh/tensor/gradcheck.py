"""Finite-difference verification of tape gradients.

Two checkers:

* coordinate_check — perturbs every coordinate of every input of a small
  function and compares the full gradient against central differences.
* directional_check — samples random Rademacher directions over a
  parameter set and compares d/dh f(theta + h*v) against grad . v. Scales
  to whole models where coordinate-wise differencing is unaffordable.

The gradient under test is the one recorded at the tensors' own precision;
the probe evaluations run in float64 so the difference quotient resolves
well below a 32-bit tolerance (a float32 quotient at step 1e-3 carries
~1e-4 relative noise of its own, which would drown the check). Functions
handed to the checkers must therefore derive any internal constants from
their inputs' dtype.

Comparison uses the guarded form |a - b| <= atol + rtol * max(|a|, |b|);
rtol carries the contract (1e-3 for 32-bit tensors, 1e-5 for 64-bit) and
the small atol floor keeps near-zero gradients from dividing noise by
noise.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, tape

F32_SETTINGS = {"h": 1e-3, "rtol": 1e-3, "atol": 1e-5}
F64_SETTINGS = {"h": 1e-6, "rtol": 1e-5, "atol": 1e-10}


def settings_for(dtype) -> dict:
    return dict(F32_SETTINGS if np.dtype(dtype) == np.float32 else F64_SETTINGS)


def _close(a: float, b: float, rtol: float, atol: float) -> bool:
    return abs(a - b) <= atol + rtol * max(abs(a), abs(b))


def max_violation(a: np.ndarray, b: np.ndarray, rtol: float, atol: float) -> float:
    """Largest guarded error over two arrays; <= 1.0 means pass."""
    denom = atol + rtol * np.maximum(np.abs(a), np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def coordinate_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float | None = None,
    rtol: float | None = None,
    atol: float | None = None,
) -> float:
    """Check grads of scalar-valued fn(*inputs) coordinate by coordinate.

    Returns the worst guarded error (pass if <= 1). Raises AssertionError
    on failure naming the offending input index and coordinate.
    """
    cfg = settings_for(inputs[0].dtype)
    h = cfg["h"] if h is None else h
    rtol = cfg["rtol"] if rtol is None else rtol
    atol = cfg["atol"] if atol is None else atol

    with tape() as t:
        out = fn(*inputs)
        grads = t.backward(out)

    probe_base = [Tensor(x.data.astype(np.float64)) for x in inputs]

    worst = 0.0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = grads.get(x)
        assert analytic is not None, f"input {i} received no gradient"
        for j in range(x.size):
            vals = []
            for sign in (+1.0, -1.0):
                bumped = probe_base[i].data.ravel().copy()
                bumped[j] += sign * h
                probe = Tensor(bumped.reshape(x.shape), dtype=np.float64)
                probed = [probe if k == i else probe_base[k] for k in range(len(inputs))]
                vals.append(fn(*probed).item())
            fd = (vals[0] - vals[1]) / (2.0 * h)
            an = float(analytic.ravel()[j])
            err = abs(fd - an) / (atol + rtol * max(abs(fd), abs(an)))
            worst = max(worst, err)
            assert _close(fd, an, rtol, atol), (
                f"input {i} coord {j}: finite-diff {fd:.6g} vs tape {an:.6g} "
                f"(guarded err {err:.3g})"
            )
    return worst


def directional_check(
    loss_fn: Callable[[dict], Tensor],
    params: dict,
    rng: np.random.Generator,
    num_directions: int = 10,
    h: float | None = None,
    rtol: float | None = None,
    atol: float | None = None,
) -> float:
    """Check a whole parameter set with random +-1 directions.

    loss_fn maps {name: Tensor} to a scalar Tensor. Every parameter must
    have requires_grad set. Returns the worst guarded error (<= 1 passes).
    """
    names = sorted(params)
    dtype = params[names[0]].dtype
    cfg = settings_for(dtype)
    h = cfg["h"] if h is None else h
    rtol = cfg["rtol"] if rtol is None else rtol
    atol = cfg["atol"] if atol is None else atol

    with tape() as t:
        loss = loss_fn(params)
        grads = t.backward(loss)

    worst = 0.0
    for _ in range(num_directions):
        direction = {n: rng.choice([-1.0, 1.0], size=params[n].shape) for n in names}
        analytic = 0.0
        for n in names:
            g = grads.get(params[n])
            if g is not None:
                analytic += float(np.sum(g.astype(np.float64) * direction[n]))

        probes = []
        for sign in (+1.0, -1.0):
            shifted = {
                n: Tensor(params[n].data.astype(np.float64) + sign * h * direction[n])
                for n in names
            }
            probes.append(loss_fn(shifted).item())
        fd = (probes[0] - probes[1]) / (2.0 * h)
        err = abs(fd - analytic) / (atol + rtol * max(abs(fd), abs(analytic)))
        worst = max(worst, err)
        assert _close(fd, analytic, rtol, atol), (
            f"directional derivative {fd:.6g} vs tape {analytic:.6g} (guarded err {err:.3g})"
        )
    return worst
