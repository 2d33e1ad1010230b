"""Minimal numpy neural-network kernel.

Layers are immutable descriptions; parameters live in a plain ordered
``dict`` mapping names to arrays (a "param set").  Every function here is
pure: it returns new arrays and never mutates its inputs.

Tensors are laid out batch-first.  Images are channels-last,
``(batch, rows, cols, channels)``, which keeps the convolution gathers
contiguous.
"""
from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

ParamSet = dict  # name -> np.ndarray, insertion ordered

# check_gradients stacks independent batches along axis 0; batch norm then
# takes its training statistics per group instead of over the whole axis
_BN_GROUPS: ContextVar[int] = ContextVar("bn_groups", default=1)


class ShapeError(ValueError):
    """Raised when a tensor does not match what a layer expects."""


class MissingParameterError(KeyError):
    """Raised when a param set lacks a tensor a layer needs."""


def _lookup(params, name, layer):
    try:
        return params[name]
    except KeyError:
        raise MissingParameterError(f"layer {layer!r} needs parameter {name!r}") from None


def _colsum(a):
    # BLAS reduction; numpy's strided axis-0 sum is slow for few columns
    return np.ones(a.shape[0], a.dtype) @ a


@njit(cache=True)
def _rowwise(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for p in range(a.shape[1]):
            v = a[i, p]
            for j in range(b.shape[1]):
                out[i, j] += v * b[p, j]
    return out


def _matmul(a, b, training):
    """``a @ b``; in inference mode each row sums in a fixed order.

    BLAS blocks differently depending on the row count, so a sample's
    result could change in the last bit with the batch it arrives in.
    Inference goes through a loop whose rows never interact, which makes
    batched evaluation bit-identical to per-sample evaluation.
    """
    if training:
        return a @ b
    dt = np.result_type(a, b)
    return _rowwise(np.ascontiguousarray(a, dt), np.ascontiguousarray(b, dt))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    name: str

    kind = "layer"

    def param_shapes(self) -> dict:
        return {}

    def buffer_shapes(self) -> dict:
        """Non-trainable state tensors as ``name -> (shape, fill value)``."""
        return {}

    def init_params(self, rng, dtype) -> dict:
        return {}

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def param_names(self) -> list:
        return list(self.param_shapes())

    def forward(self, params, x, training):
        """Return ``(y, cache, buffer_updates)``."""
        raise NotImplementedError

    def backward(self, params, cache, dy, need_dx):
        """Return ``(dx or None, grads)``."""
        raise NotImplementedError

    def _check_ndim(self, shape, ndim):
        if len(shape) != ndim:
            raise ShapeError(
                f"layer {self.name!r} ({self.kind}) expects {ndim}-d samples, got shape {shape}"
            )


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int = 1
    out_features: int = 1

    kind = "dense"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"dense {self.name!r}: feature counts must be positive")

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_features, self.in_features),
            f"{self.name}.bias": (self.out_features,),
        }

    def init_params(self, rng, dtype):
        w = glorot_uniform(
            rng, (self.out_features, self.in_features), self.in_features, self.out_features, dtype
        )
        return {f"{self.name}.weight": w, f"{self.name}.bias": np.zeros(self.out_features, dtype)}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(
                f"layer {self.name!r} (dense) expects ({self.in_features},), got {shape}"
            )
        return (self.out_features,)

    def forward(self, params, x, training):
        self.output_shape(x.shape[1:])
        w = _lookup(params, f"{self.name}.weight", self.name)
        b = _lookup(params, f"{self.name}.bias", self.name)
        return _matmul(x, w.T, training) + b, x, {}

    def backward(self, params, cache, dy, need_dx):
        x = cache
        w = params[f"{self.name}.weight"]
        grads = {f"{self.name}.weight": dy.T @ x, f"{self.name}.bias": _colsum(dy)}
        return (dy @ w if need_dx else None), grads


@njit(cache=True)
def _gather(x):
    # im2col for a 3x3 window with zero padding: (B, H, W, C) -> (B*H*W, 9*C)
    # window slot k = 3*i + j reads x[r + i - 1, s + j - 1]
    b, h, w, c = x.shape
    out = np.empty((b, h, w, 9, c), x.dtype)
    for n in range(b):
        for r in range(h):
            for s in range(w):
                for i in range(3):
                    rr = r + i - 1
                    for j in range(3):
                        ss = s + j - 1
                        k = 3 * i + j
                        if 0 <= rr < h and 0 <= ss < w:
                            for q in range(c):
                                out[n, r, s, k, q] = x[n, rr, ss, q]
                        else:
                            for q in range(c):
                                out[n, r, s, k, q] = 0
    return out.reshape(b * h * w, 9 * c)


@njit(cache=True)
def _scatter(z, b, h, w):
    # adjoint of _gather: (B*H*W, 9*C) -> (B, H, W, C)
    c = z.shape[1] // 9
    z = z.reshape(b, h, w, 9, c)
    out = np.zeros((b, h, w, c), z.dtype)
    for n in range(b):
        for r in range(h):
            for s in range(w):
                for i in range(3):
                    rr = r + i - 1
                    if rr < 0 or rr >= h:
                        continue
                    for j in range(3):
                        ss = s + j - 1
                        if ss < 0 or ss >= w:
                            continue
                        k = 3 * i + j
                        for q in range(c):
                            out[n, rr, ss, q] += z[n, r, s, k, q]
    return out


@njit(cache=True)
def _bn_train(flat, gamma, beta, eps):
    # two-pass batch statistics, accumulated in float64
    m, c = flat.shape
    mean = np.zeros(c)
    for r in range(m):
        for q in range(c):
            mean[q] += flat[r, q]
    mean /= m
    var = np.zeros(c)
    for r in range(m):
        for q in range(c):
            d = flat[r, q] - mean[q]
            var[q] += d * d
    var /= m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(flat)
    y = np.empty_like(flat)
    for r in range(m):
        for q in range(c):
            v = (flat[r, q] - mean[q]) * inv[q]
            xhat[r, q] = v
            y[r, q] = v * gamma[q] + beta[q]
    return y, xhat, mean, var, inv


@njit(cache=True)
def _bn_train_grad(dy, xhat, gamma, inv):
    m, c = dy.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for r in range(m):
        for q in range(c):
            dbeta[q] += dy[r, q]
            dgamma[q] += dy[r, q] * xhat[r, q]
    dx = np.empty_like(dy)
    for r in range(m):
        for q in range(c):
            dx[r, q] = gamma[q] * inv[q] * (dy[r, q] - (dbeta[q] + xhat[r, q] * dgamma[q]) / m)
    return dx, dgamma, dbeta


@njit(cache=True)
def _leaky(x, slope):
    flat = x.reshape(-1)
    y = np.empty_like(flat)
    gain = np.empty_like(flat)
    for i in range(flat.size):
        g = 1.0 if flat[i] > 0 else slope
        gain[i] = g
        y[i] = flat[i] * g
    return y.reshape(x.shape), gain.reshape(x.shape)


@dataclass(frozen=True)
class Conv2d(Layer):
    """3x3 cross-correlation, stride 1, zero "same" padding.

    Samples are channels-last ``(rows, cols, channels)``; the weight is
    stored as ``(out, in, 3, 3)``.  The window gather runs on whichever side
    has fewer channels.  ``zero_init`` starts the weight at zero instead of
    Glorot, used for output projections that should begin neutral.
    """

    in_channels: int = 1
    out_channels: int = 1
    zero_init: bool = False

    kind = "conv2d"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"conv2d {self.name!r}: channel counts must be positive")

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_channels, self.in_channels, 3, 3),
            f"{self.name}.bias": (self.out_channels,),
        }

    def init_params(self, rng, dtype):
        shape = (self.out_channels, self.in_channels, 3, 3)
        w = glorot_uniform(rng, shape, self.in_channels * 9, self.out_channels * 9, dtype)
        if self.zero_init:
            w = np.zeros_like(w)  # still draw, so later layers see the same rng stream
        return {f"{self.name}.weight": w, f"{self.name}.bias": np.zeros(self.out_channels, dtype)}

    def output_shape(self, shape):
        self._check_ndim(shape, 3)
        if shape[2] != self.in_channels:
            raise ShapeError(
                f"layer {self.name!r} (conv2d) expects {self.in_channels} channels, got {shape[2]}"
            )
        return tuple(shape[:2]) + (self.out_channels,)

    @property
    def _gather_input(self):
        return self.in_channels <= self.out_channels

    def forward(self, params, x, training):
        self.output_shape(x.shape[1:])
        w = _lookup(params, f"{self.name}.weight", self.name)
        b = _lookup(params, f"{self.name}.bias", self.name)
        n, h, wd, c = x.shape
        o = self.out_channels
        if self._gather_input:
            # rows (k, c) -> w[o, c, i, j]
            wg = w.transpose(2, 3, 1, 0).reshape(9 * c, o)
            cols = _gather(np.ascontiguousarray(x))
            y = _matmul(cols, wg, training).reshape(n, h, wd, o)
            cache = (cols, x.shape)
        else:
            # columns (8 - k, o): the scatter of x @ wt is the same correlation
            wt = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, 9 * o)
            xf = x.reshape(-1, c)
            y = _scatter(_matmul(xf, wt, training), n, h, wd)
            cache = (xf, x.shape)
        return y + b, cache, {}

    def backward(self, params, cache, dy, need_dx):
        w = params[f"{self.name}.weight"]
        flat, (n, h, wd, c) = cache
        o = self.out_channels
        dyf = dy.reshape(-1, o)
        if self._gather_input:
            wg = w.transpose(2, 3, 1, 0).reshape(9 * c, o)
            dw = (flat.T @ dyf).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
            dx = _scatter(np.ascontiguousarray(dyf @ wg.T), n, h, wd) if need_dx else None
        else:
            wt = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, 9 * o)
            gdy = _gather(np.ascontiguousarray(dy))
            dwt = (flat.T @ gdy).reshape(c, 3, 3, o)
            dw = dwt.transpose(3, 0, 1, 2)[:, :, ::-1, ::-1]
            dx = (gdy @ wt.T).reshape(n, h, wd, c) if need_dx else None
        grads = {
            f"{self.name}.weight": np.ascontiguousarray(dw),
            f"{self.name}.bias": _colsum(dyf),
        }
        return dx, grads


@dataclass(frozen=True)
class BatchNorm(Layer):
    """Per-channel batch normalization; the channel axis is the last one."""

    num_channels: int = 1
    momentum: float = 0.9
    eps: float = 1e-5

    kind = "batchnorm"

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.num_channels,), f"{self.name}.beta": (self.num_channels,)}

    def buffer_shapes(self):
        return {
            f"{self.name}.running_mean": ((self.num_channels,), 0.0),
            f"{self.name}.running_var": ((self.num_channels,), 1.0),
        }

    def init_params(self, rng, dtype):
        c = self.num_channels
        return {f"{self.name}.gamma": np.ones(c, dtype), f"{self.name}.beta": np.zeros(c, dtype)}

    def output_shape(self, shape):
        if len(shape) < 1 or shape[-1] != self.num_channels:
            raise ShapeError(
                f"layer {self.name!r} (batchnorm) expects {self.num_channels} channels, got {shape}"
            )
        return shape

    def forward(self, params, x, training):
        self.output_shape(x.shape[1:])
        gamma = _lookup(params, f"{self.name}.gamma", self.name)
        beta = _lookup(params, f"{self.name}.beta", self.name)
        flat = np.ascontiguousarray(x).reshape(-1, self.num_channels)
        dt = x.dtype.type
        if training:
            rm = _lookup(params, f"{self.name}.running_mean", self.name)
            rv = _lookup(params, f"{self.name}.running_var", self.name)
            groups = _BN_GROUPS.get()
            if groups > 1:
                parts = flat.reshape(groups, -1, self.num_channels)
                centered = parts - parts.mean(axis=1, keepdims=True)
                var = np.mean(centered * centered, axis=1, keepdims=True)
                y = centered / np.sqrt(var + self.eps) * gamma + beta
                return y.reshape(x.shape), None, {}
            y, xhat, mean, var, inv = _bn_train(flat, gamma, beta, self.eps)
            m = dt(self.momentum)
            updates = {
                f"{self.name}.running_mean": m * rm + (1 - m) * mean.astype(x.dtype),
                f"{self.name}.running_var": m * rv + (1 - m) * var.astype(x.dtype),
            }
            return y.reshape(x.shape), (xhat, inv, True), updates
        mean = _lookup(params, f"{self.name}.running_mean", self.name)
        var = _lookup(params, f"{self.name}.running_var", self.name)
        inv = (1 / np.sqrt(var + dt(self.eps))).astype(x.dtype)
        xhat = (flat - mean) * inv
        return (xhat * gamma + beta).reshape(x.shape), (xhat, inv, False), {}

    def normalized(self, params, x, training=True):
        """The pre-affine output ``(x - mean) / std``."""
        _, (xhat, _, _), _ = self.forward(params, x, training)
        return xhat.reshape(x.shape)

    def backward(self, params, cache, dy, need_dx):
        xhat, inv, training = cache
        gamma = params[f"{self.name}.gamma"]
        dyf = np.ascontiguousarray(dy).reshape(-1, self.num_channels)
        if training:
            dx, dgamma, dbeta = _bn_train_grad(dyf, xhat, gamma, inv)
            grads = {
                f"{self.name}.gamma": dgamma.astype(dy.dtype),
                f"{self.name}.beta": dbeta.astype(dy.dtype),
            }
            return (dx.reshape(dy.shape) if need_dx else None), grads
        grads = {f"{self.name}.gamma": _colsum(dyf * xhat), f"{self.name}.beta": _colsum(dyf)}
        dx = (dyf * (gamma * inv)).reshape(dy.shape) if need_dx else None
        return dx, grads


@dataclass(frozen=True)
class LeakyReLU(Layer):
    slope: float = 0.3

    kind = "leaky-relu"

    def __post_init__(self):
        if not 0 < self.slope < 1:
            raise ValueError(f"leaky-relu {self.name!r}: slope must lie in (0, 1)")

    def forward(self, params, x, training):
        y, gain = _leaky(np.ascontiguousarray(x), x.dtype.type(self.slope))
        return y, gain, {}

    def backward(self, params, cache, dy, need_dx):
        return dy * cache, {}


@dataclass(frozen=True)
class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, params, x, training):
        # split by sign so exp never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
        return y, y, {}

    def backward(self, params, cache, dy, need_dx):
        y = cache
        return dy * y * (1 - y), {}


@dataclass(frozen=True)
class Reshape(Layer):
    """Reshape each sample; the batch axis is left alone."""

    target: tuple = (1,)

    kind = "reshape"

    def __post_init__(self):
        if any(d < 1 for d in self.target):
            raise ValueError(f"reshape {self.name!r}: target dims must be positive")

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.target)):
            raise ShapeError(
                f"layer {self.name!r} (reshape) cannot map {shape} onto {self.target}"
            )
        return tuple(self.target)

    def forward(self, params, x, training):
        self.output_shape(x.shape[1:])
        return x.reshape((x.shape[0],) + tuple(self.target)), x.shape, {}

    def backward(self, params, cache, dy, need_dx):
        return dy.reshape(cache), {}


@dataclass(frozen=True)
class Residual(Layer):
    """``y = x + body(x)``; the body must preserve the sample shape."""

    body: tuple = field(default_factory=tuple)

    kind = "residual"

    def param_shapes(self):
        return _merge(layer.param_shapes() for layer in self.body)

    def buffer_shapes(self):
        return _merge(layer.buffer_shapes() for layer in self.body)

    def init_params(self, rng, dtype):
        return _merge(layer.init_params(rng, dtype) for layer in self.body)

    def output_shape(self, shape):
        out = infer_shape(self.body, shape)
        if out != tuple(shape):
            raise ShapeError(f"layer {self.name!r} (residual) body maps {shape} to {out}")
        return out

    def forward(self, params, x, training):
        y, caches, updates = _run(self.body, params, x, training, frozen=frozenset())
        return x + y, caches, updates

    def backward(self, params, cache, dy, need_dx):
        dx, grads = _unwind(self.body, params, cache, dy, need_dx=need_dx, frozen=frozenset())
        return (dy + dx if need_dx else None), grads


def _merge(dicts: Iterable[dict]) -> dict:
    out = {}
    for d in dicts:
        out.update(d)
    return out


# --------------------------------------------------------------------------
# stack evaluation
# --------------------------------------------------------------------------


def infer_shape(stack: Sequence[Layer], shape) -> tuple:
    """Per-sample output shape of ``stack``; raises :class:`ShapeError`."""
    shape = tuple(shape)
    for layer in stack:
        shape = layer.output_shape(shape)
    return shape


def param_shapes(stack: Sequence[Layer]) -> dict:
    return _merge(layer.param_shapes() for layer in stack)


def buffer_names(stack: Sequence[Layer]) -> list:
    return list(_merge(layer.buffer_shapes() for layer in stack))


def init_params(stack: Sequence[Layer], seed=0, dtype=np.float32) -> ParamSet:
    """Seeded Glorot-uniform initialization, buffers included."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in stack:
        params.update(layer.init_params(rng, dtype))
        for name, (shape, fill) in layer.buffer_shapes().items():
            params[name] = np.full(shape, fill, dtype=dtype)
    return params


def _is_frozen(layer, frozen):
    names = layer.param_names()
    return bool(names) and all(n in frozen for n in names)


def _run(stack, params, x, training, frozen):
    caches, updates = [], {}
    for layer in stack:
        x, cache, upd = layer.forward(params, x, training and not _is_frozen(layer, frozen))
        caches.append(cache)
        updates.update(upd)
    return x, caches, updates


def _unwind(stack, params, caches, dy, need_dx, frozen):
    # dx is only propagated as far back as the earliest layer with trainables
    trainable = [
        i for i, layer in enumerate(stack)
        if any(n not in frozen for n in layer.param_names())
    ]
    first = trainable[0] if trainable else len(stack)
    grads = {}
    for i in range(len(stack) - 1, -1, -1):
        if i < first and not need_dx:
            break
        layer = stack[i]
        want_dx = need_dx or i > first
        dy, g = layer.backward(params, caches[i], dy, want_dx)
        grads.update({k: v for k, v in g.items() if k not in frozen})
    return (dy if need_dx else None), grads


def forward(stack: Sequence[Layer], params: ParamSet, x, training: bool = False):
    """Evaluate ``stack`` on a batch; inference mode by default."""
    x = np.asarray(x)
    y, _, _ = _run(stack, params, x, training, frozenset())
    return y


def loss_mse(pred, target) -> float:
    """Mean squared error over every element."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def value_and_grad(stack, params, x, target, frozen=frozenset(), training=True):
    """Loss, gradients of every non-frozen parameter, and buffer updates.

    Layers whose parameters are all frozen run in inference mode, so their
    running statistics stay untouched.
    """
    frozen = frozenset(frozen)
    x = np.asarray(x)
    pred, caches, updates = _run(stack, params, x, training, frozen)
    if pred.shape != np.shape(target):
        raise ShapeError(f"mse: prediction {pred.shape} vs target {np.shape(target)}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    dy = diff * diff.dtype.type(2.0 / diff.size)
    _, grads = _unwind(stack, params, caches, dy, need_dx=False, frozen=frozen)
    trainable = [n for n in param_shapes(stack) if n not in frozen]
    grads = {n: grads[n] for n in trainable}
    return loss, grads, {k: v for k, v in updates.items() if k not in frozen}


def backward(stack, params, x, target, frozen=frozenset(), training=True):
    """``(loss, grads)`` of the MSE between ``stack(x)`` and ``target``."""
    loss, grads, _ = value_and_grad(stack, params, x, target, frozen, training)
    return loss, grads


def _fd_sites(stack, x, training, finish):
    """Yield ``(leaf layer, its input, continuation)`` for every leaf.

    The continuation maps the leaf's outputs for ``g`` stacked copies to
    the stack's final predictions for those copies.  Residual bodies are
    entered, so a perturbed parameter only ever re-runs its own leaf.
    """
    for idx, layer in enumerate(stack):
        rest = stack[idx + 1:]

        def cont(y, g, rest=rest):
            return finish(_run(rest, _FD_PARAMS.get(), y, training, frozenset())[0], g)

        if isinstance(layer, Residual):
            def skip(y, g, base=x, cont=cont):
                return cont(y + np.concatenate([base] * g), g)

            yield from _fd_sites(layer.body, x, training, skip)
        else:
            yield layer, x, cont
        x = layer.forward(_FD_PARAMS.get(), x, training)[0]


_FD_PARAMS: ContextVar[dict] = ContextVar("fd_params")


_STENCILS = {
    2: ((1, -1), (1 / 2, -1 / 2)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def check_gradients(stack, params, x, target, step=1e-3, training=True, order=4,
                    chunk=32) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Everything is promoted to float64 first.  ``order`` picks the central
    stencil: 2 is the plain ``(f(p+h) - f(p-h)) / 2h``, and 4 adds the
    ``±2h`` points so truncation error stays far below the tolerance even
    for gradient entries near zero at ``h = 1e-3``.  Each element's error
    is relative to the numeric value, floored at 1e-6.  Returns 0.0 for a
    stack without trainable parameters.

    Perturbed copies are evaluated ``chunk`` elements at a time: the
    perturbed layer's outputs are stacked along the batch axis and the
    rest of the stack runs once over all copies, with batch-norm
    statistics taken per copy.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x64 = np.asarray(x, dtype=np.float64)
    t64 = np.asarray(target, dtype=np.float64)
    if not param_shapes(stack):
        return 0.0
    _, grads = backward(stack, p64, x64, t64, training=training)

    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    taps, coef = _STENCILS[order]
    offsets = tuple(k * step for k in taps)
    weights = np.array(coef) / step
    worst = 0.0
    tokens = (_FD_PARAMS.set(p64),)
    try:
        for layer, inp, cont in _fd_sites(stack, x64, training, lambda y, g: y):
            for name in layer.param_names():
                flat = p64[name].reshape(-1)
                analytic = grads[name].reshape(-1)
                for lo in range(0, flat.size, chunk):
                    elems = range(lo, min(lo + chunk, flat.size))
                    outs = []
                    for i in elems:
                        orig = flat[i]
                        for off in offsets:
                            flat[i] = orig + off
                            outs.append(layer.forward(p64, inp, training)[0])
                        flat[i] = orig
                    groups = len(outs)
                    token = _BN_GROUPS.set(groups)
                    try:
                        pred = cont(np.concatenate(outs), groups)
                    finally:
                        _BN_GROUPS.reset(token)
                    diff = (pred.reshape(groups, *t64.shape) - t64).reshape(groups, -1)
                    losses = np.mean(diff * diff, axis=1).reshape(-1, len(offsets))
                    numeric = losses @ weights
                    gap = np.abs(analytic[lo:lo + len(numeric)] - numeric)
                    worst = max(worst, float(np.max(gap / np.maximum(np.abs(numeric), 1e-6))))
    finally:
        _FD_PARAMS.reset(tokens[0])
    return float(worst)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    lr: float
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: ParamSet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, names=None) -> AdamState:
    """Zero moments for ``names`` (default: every tensor in ``params``)."""
    names = list(params) if names is None else list(names)
    m = {n: np.zeros_like(params[n]) for n in names}
    v = {n: np.zeros_like(params[n]) for n in names}
    return AdamState(lr=lr, m=m, v=v, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Parameters absent from ``grads`` come back as the very same arrays.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1 - b2**t) / (1 - b1**t)
    eps_t = state.eps * np.sqrt(1 - b2**t)
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            raise MissingParameterError(f"adam state has no moments for {name!r}")
        dt = p.dtype.type
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        new_params[name] = p - dt(lr_t) * m / (np.sqrt(v) + dt(eps_t))
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(state.lr, m_new, v_new, t, b1, b2, state.eps)
