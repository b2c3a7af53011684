"""Finite-difference gradient oracle and the per-op verification suite.

The oracle perturbs one coordinate at a time and compares the central
difference against the gradient produced by the tape. Relative error is
|analytic - numeric| / max(|analytic| + |numeric|, 1e-3), so coordinates
with near-zero gradients are judged on an absolute scale instead of
blowing up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .errors import UsageError
from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-5

_REL_FLOOR = 1e-3


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = DEFAULT_EPS) -> float:
    """Max relative error between the tape gradient of f at x and central differences.

    ``f`` must map one tensor to a scalar tensor and be deterministic
    (stochastic ops need their seed fixed inside ``f``).
    """
    if x.dtype != np.float64:
        raise UsageError("grad_check requires a float64 input for meaningful tolerances")
    probe = Tensor(x.data.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        loss = f(probe)
    if loss.data.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued f, got shape {loss.shape}")
    backward(tape, loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.data)

    base = x.data
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        xp = base.copy()
        xp[idx] += eps
        xm = base.copy()
        xm[idx] -= eps
        numeric[idx] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), _REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


@dataclass
class GradCheckResult:
    op: str
    max_rel_err: float
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _weights_like(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _suite_cases(rng: np.random.Generator):
    """Yield (name, [(input tensor, loss builder)]) pairs, float64 fixtures."""

    def r(*shape):
        return Tensor(rng.normal(size=shape), dtype=np.float64)

    # conv2d: check x, w and b against the same scalar loss
    x = r(2, 3, 6, 6)
    w = r(4, 3, 3, 3)
    b = r(4)
    wt = _weights_like(rng, (2, 4, 6, 6))
    yield "conv2d", [
        (x, lambda t: ops.weighted_sum(ops.conv2d(t, w, b, 1, 1), wt)),
        (w, lambda t: ops.weighted_sum(ops.conv2d(x, t, b, 1, 1), wt)),
        (b, lambda t: ops.weighted_sum(ops.conv2d(x, w, t, 1, 1), wt)),
    ]

    xs = r(1, 2, 7, 7)
    ws = _weights_like(rng, (1, 3, 3, 3))
    wstrided = r(3, 2, 3, 3)
    bs = r(3)
    yield "conv2d_strided", [
        (xs, lambda t: ops.weighted_sum(ops.conv2d(t, wstrided, bs, 2, 0), ws)),
        (wstrided, lambda t: ops.weighted_sum(ops.conv2d(xs, t, bs, 2, 0), ws)),
    ]

    xp = r(2, 3, 6, 6)
    wp = _weights_like(rng, (2, 3, 3, 3))
    yield "maxpool2d", [(xp, lambda t: ops.weighted_sum(ops.maxpool2d(t, 2, 2)[0], wp))]
    # overlapping windows exercise the accumulation path
    wp2 = _weights_like(rng, (2, 3, 5, 5))
    yield "maxpool2d_overlap", [(xp, lambda t: ops.weighted_sum(ops.maxpool2d(t, 2, 1)[0], wp2))]
    yield "avgpool2d", [(xp, lambda t: ops.weighted_sum(ops.avgpool2d(t, 2, 2), wp))]

    xd = r(4, 7)
    wd = r(7, 5)
    bd = r(5)
    wts = _weights_like(rng, (4, 5))
    yield "dense", [
        (xd, lambda t: ops.weighted_sum(ops.dense(t, wd, bd), wts)),
        (wd, lambda t: ops.weighted_sum(ops.dense(xd, t, bd), wts)),
        (bd, lambda t: ops.weighted_sum(ops.dense(xd, wd, t), wts)),
    ]

    xb = r(3, 4, 5, 5)
    gb = Tensor(rng.normal(1.0, 0.2, size=4), dtype=np.float64)
    bb = r(4)
    wb = _weights_like(rng, (3, 4, 5, 5))

    def bn_loss(xt, gt, bt):
        rm = np.zeros(4)
        rv = np.ones(4)
        return ops.weighted_sum(
            ops.batchnorm2d(xt, gt, bt, rm, rv, "train", momentum=0.1, eps=1e-5), wb
        )

    yield "batchnorm2d", [
        (xb, lambda t: bn_loss(t, gb, bb)),
        (gb, lambda t: bn_loss(xb, t, bb)),
        (bb, lambda t: bn_loss(xb, gb, t)),
    ]

    xa = r(3, 6)
    wa = _weights_like(rng, (3, 6))
    for kind in ("swish", "sigmoid", "relu"):
        yield kind, [(xa, lambda t, k=kind: ops.weighted_sum(ops.activation(k, t), wa))]

    xsm = r(4, 5)
    wsm = _weights_like(rng, (4, 5))
    yield "softmax", [(xsm, lambda t: ops.weighted_sum(ops.softmax(t), wsm))]

    xc1 = r(2, 2, 3, 3)
    xc2 = r(2, 3, 3, 3)
    wc = _weights_like(rng, (2, 5, 3, 3))
    yield "concat_channels", [
        (xc1, lambda t: ops.weighted_sum(ops.concat_channels([t, xc2]), wc)),
        (xc2, lambda t: ops.weighted_sum(ops.concat_channels([xc1, t]), wc)),
    ]

    xf1 = r(3, 4)
    xf2 = r(3, 6)
    wf = _weights_like(rng, (3, 10))
    yield "concat_cols", [
        (xf1, lambda t: ops.weighted_sum(ops.concat_cols([t, xf2]), wf)),
        (xf2, lambda t: ops.weighted_sum(ops.concat_cols([xf1, t]), wf)),
    ]

    xr1 = r(2, 3, 4, 4)
    xr2 = r(2, 3, 4, 4)
    wr = _weights_like(rng, (2, 3, 4, 4))
    yield "residual_add", [
        (xr1, lambda t: ops.weighted_sum(ops.residual_add(t, xr2), wr)),
        (xr2, lambda t: ops.weighted_sum(ops.residual_add(xr1, t), wr)),
    ]

    xdr = r(4, 6)
    wdr = _weights_like(rng, (4, 6))
    yield "dropout", [
        (xdr, lambda t: ops.weighted_sum(ops.dropout(t, 0.4, "train", rng_seed=1234), wdr))
    ]

    xf = r(2, 3, 2, 2)
    wf = _weights_like(rng, (2, 12))
    yield "flatten", [(xf, lambda t: ops.weighted_sum(ops.flatten(t), wf))]

    # probabilities kept well inside (eps, 1-eps) so the clamp stays inactive
    pb = Tensor(rng.uniform(0.05, 0.95, size=(4, 6)), dtype=np.float64)
    yb = (rng.random((4, 6)) < 0.5).astype(np.float64)
    yield "bce_multilabel_loss", [(pb, lambda t: ops.bce_multilabel_loss(t, yb))]

    xl = r(5, 7)
    yl = rng.integers(0, 7, size=5)
    yield "crossentropy_loss", [(xl, lambda t: ops.crossentropy_loss(t, yl))]

    # keep weights away from 0 where |w| has a kink
    wl = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)))
    wl = Tensor(wl.data.astype(np.float64))
    yield "l1l2_penalty", [(wl, lambda t: ops.l1l2_penalty([t], 0.001, 0.001))]

    # composite chain: conv -> batchnorm -> swish -> maxpool
    xcomp = r(2, 2, 6, 6)
    wcomp = r(3, 2, 3, 3)
    bcomp = r(3)
    gcomp = Tensor(rng.normal(1.0, 0.1, size=3), dtype=np.float64)
    bncomp = r(3)
    wtc = _weights_like(rng, (2, 3, 3, 3))

    def composite(t):
        c = ops.conv2d(t, wcomp, bcomp, 1, 1)
        n = ops.batchnorm2d(c, gcomp, bncomp, np.zeros(3), np.ones(3), "train")
        a = ops.activation("swish", n)
        p, _ = ops.maxpool2d(a, 2, 2)
        return ops.weighted_sum(p, wtc)

    yield "composite_conv_bn_pool", [(xcomp, composite)]


def run_suite(eps: float = DEFAULT_EPS, tolerance: float = DEFAULT_TOL, seed: int = 20240521):
    """Run the finite-difference check for every op; returns GradCheckResult list."""
    rng = np.random.Generator(np.random.PCG64(seed))
    results = []
    for name, cases in _suite_cases(rng):
        t0 = time.perf_counter()
        worst = 0.0
        for tensor, loss_fn in cases:
            worst = max(worst, grad_check(loss_fn, tensor, eps=eps))
        results.append(GradCheckResult(name, worst, time.perf_counter() - t0, tolerance))
    return results
