"""Finite-difference gradient verification for every layer primitive."""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import (Tape, Tensor, backward, clamp, log, no_grad, select_rows,
                       tmean, tsum)

FD_STEP = 1e-5
FD_TOL = 1e-4


def finite_diff_gradcheck(f, xs, step: float = FD_STEP) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map the given tensor(s) to a scalar Tensor deterministically.
    Error is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``,
    maximized over every element of every checked tensor.
    """
    tensors = [xs] if isinstance(xs, Tensor) else list(xs)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        out = f(*tensors)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    tape.reset()

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = f(*tensors).item()
            flat[i] = orig - step
            with no_grad():
                lo = f(*tensors).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _probed(op, probe_arr):
    """Scalarize op output against a fixed probe so every element matters."""
    probe = Tensor(probe_arr)
    return lambda *ts: tsum(op(*ts) * probe)


def _primitive_cases(rng: np.random.Generator):
    """One (name, f, inputs) case per registered primitive.

    Every probe array is drawn once here, outside the checked function, so
    each f stays deterministic across finite-difference evaluations.
    """
    n, c, h, w = 2, 3, 5, 5
    cases = []

    spec1 = ops.ConvSpec(c, 4, (3, 3), stride=1, padding=1, dilation=1)
    cases.append(("conv2d",
                  _probed(lambda x, wt, b: ops.conv2d(x, wt, b, spec1),
                          rng.standard_normal((n, 4, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, 4, c, 3, 3), _rand(rng, 4)]))
    spec2 = ops.ConvSpec(c, 2, (3, 3), stride=2, padding=2, dilation=2)
    cases.append(("conv2d_dilated",
                  _probed(lambda x, wt, b: ops.conv2d(x, wt, b, spec2),
                          rng.standard_normal((n, 2, 3, 3))),
                  [_rand(rng, n, c, 6, 6), _rand(rng, 2, c, 3, 3), _rand(rng, 2)]))

    def bn_train(x, g, b):
        # fresh state per call: train-mode output ignores running stats
        return ops.batch_norm2d(x, g, b, ops.BNState(c), training=True)

    cases.append(("batch_norm2d_train",
                  _probed(bn_train, rng.standard_normal((n, c, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, c), _rand(rng, c)]))

    eval_state = ops.BNState(c)
    eval_state.mean = rng.standard_normal(c)
    eval_state.var = np.abs(rng.standard_normal(c)) + 0.5
    eval_state.initialized = True
    cases.append(("batch_norm2d_eval",
                  _probed(lambda x, g, b: ops.batch_norm2d(x, g, b, eval_state,
                                                           training=False),
                          rng.standard_normal((n, c, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, c), _rand(rng, c)]))

    cases.append(("layer_norm2d",
                  _probed(ops.layer_norm2d, rng.standard_normal((n, c, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, c), _rand(rng, c)]))

    cases.append(("fully_connected",
                  _probed(ops.fully_connected, rng.standard_normal((4, 2))),
                  [_rand(rng, 4, 3), _rand(rng, 3, 2), _rand(rng, 2)]))

    relu_in = rng.standard_normal((4, 6))
    relu_in += np.where(relu_in >= 0, 0.3, -0.3)  # keep away from the kink
    cases.append(("relu", _probed(ops.relu, rng.standard_normal((4, 6))),
                  [Tensor(relu_in)]))
    cases.append(("sigmoid", _probed(ops.sigmoid, rng.standard_normal((4, 6))),
                  [_rand(rng, 4, 6)]))
    cases.append(("softmax", _probed(ops.softmax, rng.standard_normal((4, 5))),
                  [_rand(rng, 4, 5)]))

    cases.append(("global_avg_pool",
                  _probed(ops.global_avg_pool, rng.standard_normal((n, c))),
                  [_rand(rng, n, c, h, w)]))
    cases.append(("global_max_pool",
                  _probed(ops.global_max_pool, rng.standard_normal((n, c))),
                  [_rand(rng, n, c, h, w)]))
    cases.append(("max_pool2d",
                  _probed(lambda x: ops.max_pool2d(x, 2, 2),
                          rng.standard_normal((n, c, 2, 2))),
                  [_rand(rng, n, c, 4, 4)]))

    ssl_in = rng.standard_normal((3, 6)) * 2.0
    ssl_in[np.abs(ssl_in) < 0.2] = 0.5  # keep away from the sqrt kink
    cases.append(("signed_sqrt_l2norm",
                  _probed(ops.signed_sqrt_l2norm, rng.standard_normal((3, 6))),
                  [Tensor(ssl_in)]))

    cases.append(("concat_channels",
                  _probed(lambda a, b: ops.concat_channels([a, b]),
                          rng.standard_normal((n, c + 2, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, n, 2, h, w)]))

    cases.append(("scale_channels",
                  _probed(ops.scale_channels, rng.standard_normal((n, c, h, w))),
                  [_rand(rng, n, c, h, w), _rand(rng, n, c)]))

    cases.append(("elementwise_mul_add",
                  _probed(lambda a, b: a * b + a, rng.standard_normal((3, 4))),
                  [_rand(rng, 3, 4), _rand(rng, 3, 4)]))
    cases.append(("broadcast_add",
                  _probed(lambda a, b: a + b, rng.standard_normal((2, 3, 4, 4))),
                  [_rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 1, 1)]))

    pos = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5)
    cases.append(("log_clamp",
                  lambda x: tsum(log(clamp(x, min_value=ops.EPS_LOG))), [pos]))

    labels = rng.integers(0, 5, size=4)
    cases.append(("select_rows", lambda x: tmean(select_rows(x, labels)),
                  [_rand(rng, 4, 5)]))

    reshape_probe = Tensor(rng.standard_normal(6))
    cases.append(("reshape_mean",
                  lambda x: tsum(x.reshape(6, 4).mean(axis=1) * reshape_probe),
                  [_rand(rng, 2, 3, 4)]))
    return cases


def run_primitive_gradchecks(seeds=(0, 1, 2), step: float = FD_STEP,
                             tol: float = FD_TOL):
    """Check every registered primitive on one random case per seed.

    Returns a list of (name, max_error, passed) with one entry per primitive,
    where max_error is the worst over all seeds.
    """
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, inputs in _primitive_cases(rng):
            err = finite_diff_gradcheck(f, inputs, step=step)
            worst[name] = max(worst.get(name, 0.0), err)
    return [(name, err, err < tol) for name, err in worst.items()]
