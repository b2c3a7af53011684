"""Model graph framework: named parameter registration and forward contexts.

A ModelGraph is an ordered tree of child graphs plus local parameters and
buffers. Names are dot-joined down the tree, which gives every array a
stable identity for checkpoints, optimizer state and selective freezing.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, UsageError
from .tensor import ParamSet, Tensor

_MASK64 = (1 << 64) - 1


def mix_seed(*parts: int) -> int:
    """Deterministically fold integers into one 63-bit seed (splitmix-style)."""
    z = 0x9E3779B97F4A7C15
    for p in parts:
        z = (z + (int(p) & _MASK64) + 0xD1B54A32D192ED03) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
    return z & ((1 << 63) - 1)


class Ctx:
    """Per-forward-pass context: train/eval mode and the dropout seed stream.

    Each dropout site consumes one seed from the stream, so a fresh Ctx with
    the same ``seed`` replays identical masks regardless of batch content.
    """

    def __init__(self, mode: str = "eval", seed: int = 0, capture: Optional[dict] = None):
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.seed = int(seed)
        self.capture = capture
        self._dropout_calls = 0

    def dropout_seed(self) -> int:
        s = mix_seed(self.seed, self._dropout_calls)
        self._dropout_calls += 1
        return s

    def grab(self, key: str, tensor: Tensor) -> Tensor:
        """Record an intermediate tensor when capture is requested."""
        if self.capture is not None:
            self.capture[key] = tensor
        return tensor


class ModelGraph:
    """Base class for all models and layers."""

    def __init__(self) -> None:
        self._children: "Dict[str, ModelGraph]" = {}
        self._params: "Dict[str, Tuple[Tensor, bool]]" = {}
        self._buffers: "Dict[str, np.ndarray]" = {}

    # -- registration -------------------------------------------------

    def add_child(self, name: str, child: "ModelGraph") -> "ModelGraph":
        self._check_name(name)
        self._children[name] = child
        return child

    def add_param(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        self._check_name(name)
        t = Tensor(value, requires_grad=True)
        self._params[name] = (t, trainable)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._check_name(name)
        arr = np.ascontiguousarray(value)
        self._buffers[name] = arr
        return arr

    def _check_name(self, name: str) -> None:
        if not name or "." in name:
            raise UsageError(f"invalid registration name {name!r}")
        if name in self._children or name in self._params or name in self._buffers:
            raise UsageError(f"duplicate registration name {name!r}")

    # -- traversal ----------------------------------------------------

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Tensor, bool]]:
        # a parameter counts as trainable only while its tensor still wants
        # gradients, so freezing a subtree is reflected everywhere
        for name, (t, trainable) in self._params.items():
            yield prefix + name, t, trainable and t.requires_grad
        for cname, child in self._children.items():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def param_set(self) -> ParamSet:
        ps = ParamSet()
        for name, t, trainable in self.named_params():
            ps.add(name, t, trainable)
        return ps

    def param_count(self) -> int:
        """Total trainable parameter elements; a pure function of the config."""
        return sum(t.data.size for _, t, trainable in self.named_params() if trainable)

    def set_requires_grad(self, flag: bool) -> None:
        for _, t, _ in self.named_params():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grads(self) -> None:
        for _, t, _ in self.named_params():
            t.grad = None

    # -- state import/export -------------------------------------------

    def export_arrays(self) -> "Dict[str, Tuple[int, np.ndarray]]":
        """All state as name -> (kind, array); kind 0 = param, 1 = buffer."""
        out: "Dict[str, Tuple[int, np.ndarray]]" = {}
        for name, t, _ in self.named_params():
            out[name] = (0, t.data)
        for name, arr in self.named_buffers():
            out[name] = (1, arr)
        return out

    def import_arrays(
        self,
        arrays: "Dict[str, np.ndarray]",
        allow_missing: bool = False,
        ignore_extra: bool = False,
    ) -> None:
        """Load state in place by name. Shape mismatches are configuration errors."""
        own_params = {name: t for name, t, _ in self.named_params()}
        own_buffers = dict(self.named_buffers())
        seen = set()
        for name, arr in arrays.items():
            if name in own_params:
                tgt = own_params[name].data
            elif name in own_buffers:
                tgt = own_buffers[name]
            else:
                if ignore_extra:
                    continue
                raise ConfigError(f"checkpoint tensor {name!r} has no slot in this model")
            if tuple(arr.shape) != tgt.shape:
                raise ConfigError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)}, model {tgt.shape}"
                )
            tgt[...] = arr.astype(tgt.dtype, copy=False)
            seen.add(name)
        if not allow_missing:
            missing = (set(own_params) | set(own_buffers)) - seen
            if missing:
                raise ConfigError(
                    "checkpoint is missing tensors: " + ", ".join(sorted(missing)[:8])
                )

    # -- forward --------------------------------------------------------

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Ctx) -> Tensor:
        return self.forward(x, ctx)


class Conv2d(ModelGraph):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            raise UsageError("Conv2d needs an explicit rng for reproducible init")
        self.stride = stride
        self.pad = pad
        scale = math.sqrt(2.0 / (in_ch * k * k))
        self.w = self.add_param("w", rng.normal(0.0, scale, (out_ch, in_ch, k, k)).astype(dtype))
        self.b = self.add_param("b", np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class Linear(ModelGraph):
    def __init__(self, in_w: int, out_w: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        if rng is None:
            raise UsageError("Linear needs an explicit rng for reproducible init")
        scale = math.sqrt(2.0 / in_w)
        self.w = self.add_param("w", rng.normal(0.0, scale, (in_w, out_w)).astype(dtype))
        self.b = self.add_param("b", np.zeros(out_w, dtype=dtype))

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.dense(x, self.w, self.b)


class BatchNorm2d(ModelGraph):
    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(ch, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(ch, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(ch, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(ch, dtype=dtype))

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode=ctx.mode, momentum=self.momentum, eps=self.eps,
        )


class Activation(ModelGraph):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.activation(self.kind, x)


class MaxPool2d(ModelGraph):
    def __init__(self, k: int, stride: int):
        super().__init__()
        self.k = k
        self.stride = stride

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        out, _ = ops.maxpool2d(x, self.k, self.stride)
        return out


class Dropout(ModelGraph):
    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.dropout(x, self.p, ctx.mode, rng_seed=ctx.dropout_seed())


class Flatten(ModelGraph):
    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        return ops.flatten(x)


class Sequential(ModelGraph):
    """Runs registered children in insertion order."""

    def __init__(self, layers: "list[tuple[str, ModelGraph]]" = ()):  # type: ignore[assignment]
        super().__init__()
        for name, layer in layers:
            self.add_child(name, layer)

    def forward(self, x: Tensor, ctx: Ctx) -> Tensor:
        for child in self._children.values():
            x = child(x, ctx)
        return x
