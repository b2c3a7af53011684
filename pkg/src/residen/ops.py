"""Differentiable layer primitives over :class:`residen.tensor.Tensor`.

Shapes follow the NCHW convention. Every op validates its input shapes up
front and raises :class:`DimensionError` with the offending dimensions.
When a tape is active and an input wants gradients, the op records a
backward rule; otherwise it runs as plain numpy.

Convolution uses im2col plus a BLAS matmul. The column matrix is rebuilt
inside the backward rule instead of being cached, so peak memory stays
bounded by the live activations.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, LabelError, NumericError, UsageError
from .tensor import ParamSet, Tensor, tape_for

BCE_EPS = 1e-7

_ACTIVATIONS = ("swish", "sigmoid", "relu", "linear")


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise UsageError(f"mixed dtypes {dt} and {t.dtype}; cast inputs first")
    return dt


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _labels_array(y, dtype) -> np.ndarray:
    if isinstance(y, Tensor):
        return y.data.astype(dtype, copy=False)
    return np.asarray(y, dtype=dtype)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out_hw(H: int, W: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    OH = (H + 2 * pad - kh) // stride + 1
    OW = (W + 2 * pad - kw) // stride + 1
    return OH, OW


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, OH: int, OW: int) -> np.ndarray:
    """Padded input [N,C,Hp,Wp] -> columns [N*OH*OW, C*kh*kw]."""
    N, C, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        (N, C, OH, OW, kh, kw),
        (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * OH * OW, C * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x[N,C,H,W] * w[K,C,kh,kw] + b[K] -> [N,K,OH,OW]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError(
            f"conv2d expects x 4-D, w 4-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}"
        )
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if b.shape != (K,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({K},)")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}"
        )
    if not (np.isfinite(x.data).all() and np.isfinite(w.data).all() and np.isfinite(b.data).all()):
        raise NumericError("conv2d received non-finite input")
    dt = _same_dtype(x, w, b)

    OH, OW = _conv_out_hw(H, W, kh, kw, stride, pad)
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, OH, OW)
    w_mat = w.data.reshape(K, C * kh * kw)
    out_mat = cols @ w_mat.T
    out_mat += b.data
    out = Tensor(out_mat.reshape(N, OH, OW, K).transpose(0, 3, 1, 2).astype(dt, copy=False))

    tape = tape_for(x, w, b)
    if tape is not None:
        out.requires_grad = True
        x_data = x.data

        def bwd(go: np.ndarray) -> None:
            go_mat = go.transpose(0, 2, 3, 1).reshape(N * OH * OW, K)
            if b.requires_grad:
                b.accumulate_grad(go_mat.sum(axis=0))
            if w.requires_grad:
                if pad:
                    xpb = np.pad(x_data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                else:
                    xpb = x_data
                cols_b = _im2col(xpb, kh, kw, stride, OH, OW)
                w.accumulate_grad((go_mat.T @ cols_b).reshape(K, C, kh, kw))
            if x.requires_grad:
                dcols = (go_mat @ w_mat).reshape(N, OH, OW, C, kh, kw)
                dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                x.accumulate_grad(dxp[:, :, pad : pad + H, pad : pad + W])

        tape.record(out, bwd)
    return out


def _pool_windows(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    N, C, H, W = x.shape
    OH = (H - k) // stride + 1
    OW = (W - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (N, C, OH, OW, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False
    )
    return win, OH, OW


def _check_pool_args(x: Tensor, k: int, stride: int, name: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{name} expects a 4-D input, got {x.shape}")
    _, _, H, W = x.shape
    if k > H or k > W:
        raise DimensionError(f"{name} window {k} exceeds input {H}x{W}")
    if stride < 1:
        raise ConfigError(f"{name} stride must be >= 1, got {stride}")
    # windows must tile the input exactly; silently dropping border pixels
    # would let spatial sizes drift away from the validated trace
    if (H - k) % stride != 0 or (W - k) % stride != 0:
        raise DimensionError(
            f"{name} windows (k={k}, stride={stride}) do not tile input {H}x{W}"
        )


def maxpool2d(x: Tensor, k: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Max pooling; returns (pooled tensor, argmax indices within each window)."""
    _check_pool_args(x, k, stride, "maxpool2d")
    N, C, H, W = x.shape
    win, OH, OW = _pool_windows(x.data, k, stride)
    flat = win.reshape(N, C, OH, OW, k * k)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        dt = x.dtype

        def bwd(go: np.ndarray) -> None:
            scat = np.zeros((N, C, OH, OW, k * k), dtype=dt)
            np.put_along_axis(scat, idx[..., None], go[..., None], axis=-1)
            scat = scat.reshape(N, C, OH, OW, k, k)
            dx = np.zeros((N, C, H, W), dtype=dt)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += scat[
                        :, :, :, :, i, j
                    ]
            x.accumulate_grad(dx)

        tape.record(out, bwd)
    return out, idx


def avgpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Mean pooling; the gradient splits equally across each window."""
    _check_pool_args(x, k, stride, "avgpool2d")
    N, C, H, W = x.shape
    win, OH, OW = _pool_windows(x.data, k, stride)
    out = Tensor(win.mean(axis=(4, 5)))

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        dt = x.dtype
        inv = 1.0 / (k * k)

        def bwd(go: np.ndarray) -> None:
            share = (go * inv).astype(dt, copy=False)
            dx = np.zeros((N, C, H, W), dtype=dt)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += share
            x.accumulate_grad(dx)

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# affine, normalization, activations


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x[N,F] @ w[F,U] + b[U]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"dense expects x 2-D, w 2-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}"
        )
    N, F = x.shape
    Fw, U = w.shape
    if F != Fw:
        raise DimensionError(f"dense inner dims disagree: x has {F}, w expects {Fw}")
    if b.shape != (U,):
        raise DimensionError(f"dense bias shape {b.shape} != ({U},)")
    _same_dtype(x, w, b)
    out = Tensor(x.data @ w.data + b.data)

    tape = tape_for(x, w, b)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            if x.requires_grad:
                x.accumulate_grad(go @ w.data.T)
            if w.requires_grad:
                w.accumulate_grad(x.data.T @ go)
            if b.requires_grad:
                b.accumulate_grad(go.sum(axis=0))

        tape.record(out, bwd)
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N,H,W).

    Train mode normalizes with batch statistics (biased variance) and moves
    the running buffers by ``momentum`` toward them; eval mode normalizes
    with the running buffers.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a 4-D input, got {x.shape}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm2d gamma/beta must be ({C},), got {gamma.shape}, {beta.shape}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")
    dt = _same_dtype(x, gamma, beta)

    if mode == "train":
        M = N * H * W
        if M < 2:
            raise ConfigError("batchnorm2d train mode needs N*H*W >= 2 per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(dt, copy=False)
        var = running_var.astype(dt, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    tape = tape_for(x, gamma, beta)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((go * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(go.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                g = go * gamma.data[None, :, None, None]
                if mode == "train":
                    # d/dx of (x - mean(x)) / sqrt(var(x) + eps), batch statistics included
                    m1 = g.mean(axis=(0, 2, 3), keepdims=True)
                    m2 = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    dx = inv_std[None, :, None, None] * (g - m1 - xhat * m2)
                else:
                    dx = inv_std[None, :, None, None] * g
                x.accumulate_grad(dx.astype(dt, copy=False))

        tape.record(out, bwd)
    return out


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity: swish (x*sigmoid(x)), sigmoid, relu, or linear."""
    if kind not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")
    if kind == "linear":
        out_data = x.data
    elif kind == "relu":
        out_data = np.maximum(x.data, 0)
    else:
        sig = _stable_sigmoid(x.data)
        out_data = sig if kind == "sigmoid" else x.data * sig
    out = Tensor(out_data)

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            if kind == "linear":
                x.accumulate_grad(go)
            elif kind == "relu":
                x.accumulate_grad(go * (x.data > 0))
            elif kind == "sigmoid":
                x.accumulate_grad(go * sig * (1.0 - sig))
            else:  # swish
                x.accumulate_grad(go * (sig * (1.0 + x.data * (1.0 - sig))))

        tape.record(out, bwd)
    return out


def swish(x: Tensor) -> Tensor:
    return activation("swish", x)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of x[N,K], computed with max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax expects a 2-D input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            x.accumulate_grad(p * (go - (go * p).sum(axis=1, keepdims=True)))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate [N,Ci,H,W] tensors along the channel axis, input order kept."""
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    first = xs[0]
    if first.data.ndim != 4:
        raise DimensionError(f"concat_channels expects 4-D inputs, got {first.shape}")
    N, _, H, W = first.shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != N or t.shape[2] != H or t.shape[3] != W:
            raise DimensionError(
                f"concat_channels spatial/batch mismatch: {first.shape} vs {t.shape}"
            )
    _same_dtype(*xs)
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))

    tape = tape_for(*xs)
    if tape is not None:
        out.requires_grad = True
        splits = np.cumsum([t.shape[1] for t in xs])[:-1]

        def bwd(go: np.ndarray) -> None:
            for t, piece in zip(xs, np.split(go, splits, axis=1)):
                if t.requires_grad:
                    t.accumulate_grad(piece)

        tape.record(out, bwd)
    return out


def concat_cols(xs: list[Tensor]) -> Tensor:
    """Concatenate [N,Fi] matrices along the feature axis, input order kept."""
    if not xs:
        raise DimensionError("concat_cols needs at least one input")
    first = xs[0]
    if first.data.ndim != 2:
        raise DimensionError(f"concat_cols expects 2-D inputs, got {first.shape}")
    N = first.shape[0]
    for t in xs[1:]:
        if t.data.ndim != 2 or t.shape[0] != N:
            raise DimensionError(f"concat_cols batch mismatch: {first.shape} vs {t.shape}")
    _same_dtype(*xs)
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))

    tape = tape_for(*xs)
    if tape is not None:
        out.requires_grad = True
        splits = np.cumsum([t.shape[1] for t in xs])[:-1]

        def bwd(go: np.ndarray) -> None:
            for t, piece in zip(xs, np.split(go, splits, axis=1)):
                if t.requires_grad:
                    t.accumulate_grad(piece)

        tape.record(out, bwd)
    return out


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b for identical shapes; gradient passes to both unchanged."""
    if a.shape != b.shape:
        raise DimensionError(
            f"residual_add shape mismatch {a.shape} vs {b.shape}; downsample or project first"
        )
    _same_dtype(a, b)
    out = Tensor(a.data + b.data)

    tape = tape_for(a, b)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            if a.requires_grad:
                a.accumulate_grad(go)
            if b.requires_grad:
                b.accumulate_grad(go)

        tape.record(out, bwd)
    return out


def dropout(x: Tensor, p: float, mode: str, rng_seed: int) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and scales by 1/(1-p).

    Eval mode (and p == 0) returns the input bitwise unchanged. The mask is a
    pure function of ``rng_seed``.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        out = Tensor(x.data)
        tape = tape_for(x)
        if tape is not None:
            out.requires_grad = True
            tape.record(out, lambda go: x.accumulate_grad(go))
        return out

    rng = np.random.Generator(np.random.PCG64(rng_seed))
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale_f = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out = Tensor(x.data * keep * scale_f)

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            x.accumulate_grad(go * keep * scale_f)

        tape.record(out, bwd)
    return out


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of [N, ...] to [N, prod(rest)]."""
    if x.data.ndim < 2:
        raise DimensionError(f"flatten expects at least 2-D, got {x.shape}")
    orig = x.shape
    out = Tensor(x.data.reshape(orig[0], -1))

    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, lambda go: x.accumulate_grad(go.reshape(orig)))
    return out


# ---------------------------------------------------------------------------
# scalar reductions and losses


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a 0-d scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, lambda go: x.accumulate_grad(np.full_like(x.data, go)))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    cf = np.asarray(c, dtype=x.dtype)
    out = Tensor(x.data * cf)
    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, lambda go: x.accumulate_grad(go * cf))
    return out


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) for a constant weight array."""
    warr = np.asarray(weights, dtype=x.dtype)
    if warr.shape != x.data.shape:
        raise DimensionError(f"weighted_sum weights {warr.shape} != input {x.shape}")
    out = Tensor(np.asarray((x.data * warr).sum(), dtype=x.dtype))
    tape = tape_for(x)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, lambda go: x.accumulate_grad(go * warr))
    return out


def bce_multilabel_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy over all (sample, label) cells.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs;
    the gradient is zero where the clamp is active.
    """
    if p.data.ndim != 2:
        raise DimensionError(f"bce_multilabel_loss expects p[N,A], got {p.shape}")
    yarr = _labels_array(y, p.dtype)
    if yarr.shape != p.data.shape:
        raise DimensionError(f"labels shape {yarr.shape} != probabilities shape {p.shape}")
    if not np.isin(yarr, (0.0, 1.0)).all():
        raise LabelError("bce_multilabel_loss labels must be 0 or 1")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    M = pc.size
    loss = -(yarr * np.log(pc) + (1.0 - yarr) * np.log(1.0 - pc)).sum() / M
    out = Tensor(np.asarray(loss, dtype=p.dtype))

    tape = tape_for(p)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            g = (pc - yarr) / (pc * (1.0 - pc)) / M
            g[(p.data < BCE_EPS) | (p.data > 1.0 - BCE_EPS)] = 0.0
            p.accumulate_grad(go * g)

        tape.record(out, bwd)
    return out


def crossentropy_loss(logits: Tensor, y) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    if logits.data.ndim != 2:
        raise DimensionError(f"crossentropy_loss expects logits[N,K], got {logits.shape}")
    N, K = logits.shape
    yi = np.asarray(y.data if isinstance(y, Tensor) else y)
    yi = yi.astype(np.int64)
    if yi.shape != (N,):
        raise DimensionError(f"class indices shape {yi.shape} != ({N},)")
    if yi.min(initial=0) < 0 or yi.max(initial=0) >= K:
        raise LabelError(f"class indices must lie in [0, {K})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(N), yi].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    tape = tape_for(logits)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            g = np.exp(logp)
            g[np.arange(N), yi] -= 1.0
            logits.accumulate_grad(go * g / N)

        tape.record(out, bwd)
    return out


def l1l2_penalty(params, lambda1: float, lambda2: float) -> Tensor:
    """lambda1 * sum|w| + lambda2 * sum(w^2) over the given parameters.

    ``params`` may be a ParamSet or an iterable of tensors. Returns a 0-d
    float32 zero when the collection is empty.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError("regularization strengths must be >= 0")
    tensors = [t for _, t, _ in params] if isinstance(params, ParamSet) else list(params)
    if not tensors:
        return Tensor(np.asarray(0.0, dtype=np.float32))
    dt = _same_dtype(*tensors)
    value = sum(lambda1 * np.abs(t.data).sum() + lambda2 * (t.data**2).sum() for t in tensors)
    out = Tensor(np.asarray(value, dtype=dt))

    tape = tape_for(*tensors)
    if tape is not None:
        out.requires_grad = True

        def bwd(go: np.ndarray) -> None:
            for t in tensors:
                if t.requires_grad:
                    t.accumulate_grad(go * (lambda1 * np.sign(t.data) + 2.0 * lambda2 * t.data))

        tape.record(out, bwd)
    return out
