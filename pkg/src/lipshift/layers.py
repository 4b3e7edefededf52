"""Lipschitz layers.

Every layer maps a batch ``[N, ...]`` tensor to a batch tensor and declares a
Lipschitz upper bound in the l2 norm for its per-sample map.  Layers with
weights also provide a differentiable bound (``bound_tensor``) used by margin
training; it runs warm-started power iteration on the current weights and
returns ``u^T M v`` as a tape expression.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .spectral import LinearOperator, SigmaEstimate, power_iteration, spectral_normalized_init
from .tensor import Tensor

# Power-iteration settings for declared bounds.  Tighter than the library
# defaults because these numbers feed certificates.
BOUND_MAX_ITERS = 3000
BOUND_TOL = 1e-10


def _param(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _along_axis(vec: Tensor, like: Tensor, axis: int) -> Tensor:
    """Broadcast a per-channel vector across ``like`` along ``axis``."""
    shape = [1] * like.ndim
    shape[axis] = vec.shape[0]
    return T.broadcast_to(T.reshape(vec, shape), like.shape)


class Layer:
    """Base class.  Subclasses override ``forward`` and ``bound_estimate``."""

    kind = "layer"
    linear = False

    def __init__(self, name: str = ""):
        self.name = name or self.kind

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint round trip."""
        return {}

    def load_buffers(self, state: dict[str, np.ndarray]) -> None:
        pass

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def lipschitz_bound(self, input_shape: tuple[int, ...] | None = None) -> float:
        """Declared upper bound: power-iteration estimates carry the safety factor."""
        est = self.bound_estimate(input_shape)
        return est.bound() if est.iterations_used > 0 else est.value

    def bound_estimate(self, input_shape: tuple[int, ...] | None = None) -> SigmaEstimate:
        return SigmaEstimate(1.0, 0, True, 0.0)

    def bound_tensor(self, input_shape=None, update: bool = True):
        """Differentiable bound; plain floats for parameter-free layers."""
        return self.bound_estimate(input_shape).value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class _PowerIterationState:
    """Persistent right singular vector estimate for one matrix."""

    def __init__(self, size: int, seed: int):
        v = np.random.default_rng(seed).standard_normal(size)
        self.v = (v / np.linalg.norm(v)).astype(np.float32).astype(np.float64)

    def sigma_tensor(self, m: Tensor, iters: int, update: bool) -> Tensor:
        """Run ``iters`` warm-started steps on ``m`` and return ``u^T m v``."""
        mat = np.asarray(m.data, dtype=np.float64)
        v = self.v
        u = mat @ v
        for _ in range(iters):
            u = mat @ v
            nu = np.linalg.norm(u)
            if nu == 0:
                break
            w = mat.T @ (u / nu)
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            v = w / nw
            u = mat @ v
        nu = np.linalg.norm(u)
        u = u / nu if nu > 0 else u
        if update:
            # float32 rounding keeps checkpointed state exact
            self.v = v.astype(np.float32).astype(np.float64)
        uc = Tensor(u.reshape(1, -1), dtype=m.dtype)
        vc = Tensor(v.reshape(-1, 1), dtype=m.dtype)
        return T.reshape(T.matmul(T.matmul(uc, m), vc), ())


# ---------------------------------------------------------------------------
# CenterNorm


class CenterNorm(Layer):
    """Mean removal along ``axis`` with learnable per-channel scale and offset.

    ``y = gamma * (x - mean(x)) + beta``; there is no variance division.  The
    declared bound is ``max |gamma_i|`` (the centering projector has norm 1).
    """

    kind = "centernorm"

    def __init__(self, dim: int, axis: int = -1, name: str = ""):
        super().__init__(name)
        if dim < 2:
            raise ConfigError(f"CenterNorm needs dim >= 2, got {dim}")
        self.dim = dim
        self.axis = axis
        self.gamma = _param(np.ones(dim), f"{self.name}.gamma")
        self.beta = _param(np.zeros(dim), f"{self.name}.beta")

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, training=False, rng=None):
        axis = self.axis % x.ndim
        if x.shape[axis] != self.dim:
            raise DimensionError(f"CenterNorm expects {self.dim} channels on axis {axis}, got shape {x.shape}")
        mu = T.broadcast_to(T.mean(x, axis, keepdims=True), x.shape)
        centered = T.sub(x, mu)
        return T.add(T.mul(centered, _along_axis(self.gamma, x, axis)), _along_axis(self.beta, x, axis))

    def bound_estimate(self, input_shape=None):
        return SigmaEstimate(float(np.max(np.abs(self.gamma.data))), 0, True, 0.0)

    def bound_tensor(self, input_shape=None, update=True):
        return T.tmax(T.tabs(self.gamma))


# ---------------------------------------------------------------------------
# MaxMin


class MaxMin(Layer):
    """Sort channel pairs ``(2i, 2i+1)`` into ``(max, min)``."""

    kind = "maxmin"

    def __init__(self, axis: int = -1, name: str = ""):
        super().__init__(name)
        self.axis = axis

    def forward(self, x, training=False, rng=None):
        axis = self.axis % x.ndim
        c = x.shape[axis]
        if c % 2:
            raise DimensionError(f"MaxMin needs an even channel count, got {c}")
        last = axis == x.ndim - 1
        if not last:
            perm = [i for i in range(x.ndim) if i != axis] + [axis]
            x = T.transpose(x, perm)
        lead = x.shape[:-1]
        pairs = T.reshape(x, lead + (c // 2, 2))
        a = T.getitem(pairs, (Ellipsis, slice(0, 1)))
        b = T.getitem(pairs, (Ellipsis, slice(1, 2)))
        out = T.reshape(T.concatenate([T.maximum(a, b), T.minimum(a, b)], axis=-1), lead + (c,))
        if not last:
            out = T.transpose(out, list(np.argsort(perm)))
        return out


# ---------------------------------------------------------------------------
# Shift


class Shift(Layer):
    """Partial channel shift on ``[N, C, H, W]`` tensors.

    Four groups of ``C * shift_fraction`` channels move one pixel left,
    right, up and down with zero fill; other channels pass through.
    """

    kind = "shift"
    linear = True

    def __init__(self, channels: int, shift_fraction: float = 1 / 12, name: str = ""):
        super().__init__(name)
        group = channels * shift_fraction
        if shift_fraction < 0 or abs(group - round(group)) > 1e-9:
            raise ConfigError(
                f"shift_fraction {shift_fraction} does not give an integer group size for {channels} channels"
            )
        if 4 * round(group) > channels:
            raise ConfigError(f"4 shift groups of {round(group)} exceed {channels} channels")
        self.channels = channels
        self.shift_fraction = shift_fraction
        self.group = int(round(group))

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"Shift expects [N, {self.channels}, H, W], got {x.shape}")
        g = self.group
        if g == 0:
            return x
        s = slice
        left = T.pad(x[:, 0:g, :, 1:], [(0, 0), (0, 0), (0, 0), (0, 1)])
        right = T.pad(x[:, g : 2 * g, :, :-1], [(0, 0), (0, 0), (0, 0), (1, 0)])
        up = T.pad(x[:, 2 * g : 3 * g, 1:, :], [(0, 0), (0, 0), (0, 1), (0, 0)])
        down = T.pad(x[:, 3 * g : 4 * g, :-1, :], [(0, 0), (0, 0), (1, 0), (0, 0)])
        parts = [left, right, up, down]
        if 4 * g < self.channels:
            parts.append(T.getitem(x, (s(None), s(4 * g, None))))
        return T.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# Drop


class Drop(Layer):
    """Dropout (per element) or DropPath (per sample); identity at inference."""

    kind = "drop"

    def __init__(self, p_drop: float = 0.0, mode: str = "dropout", name: str = ""):
        super().__init__(name or mode)
        if not 0.0 <= p_drop < 1.0:
            raise ConfigError(f"p_drop must be in [0, 1), got {p_drop}")
        if mode not in ("dropout", "droppath"):
            raise ConfigError(f"unknown drop mode {mode!r}")
        self.p_drop = float(p_drop)
        self.mode = mode

    def forward(self, x, training=False, rng=None):
        if not training or self.p_drop == 0.0:
            return x
        if rng is None:
            raise ConfigError("training-mode drop needs an rng")
        keep = 1.0 - self.p_drop
        if self.mode == "dropout":
            mask = rng.random(x.shape) < keep
        else:
            mask = np.broadcast_to((rng.random(x.shape[0]) < keep).reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)
        return T.mul(x, Tensor(mask / keep, dtype=x.dtype))


# ---------------------------------------------------------------------------
# LiResConv


class LiResConv(Layer):
    """Affine residual 1x1 convolution ``y = x + W x + b`` on ``[N, C, H, W]``.

    The bound is the largest singular value of the composite ``I + W``,
    which is never larger than ``1 + sigma_max(W)``.  An optional
    :class:`Drop` in ``droppath`` mode guards the convolution branch.

    ``init="composite"`` draws a Gaussian matrix, normalizes ``I + G`` to unit
    spectral norm and stores ``W`` so that ``I + W`` equals the result.
    ``init="residual"`` uses ``W = residual_scale * G / sigma_max(G)``.
    """

    kind = "liresconv"
    linear = True

    def __init__(
        self,
        channels: int,
        seed: int = 0,
        init: str = "composite",
        residual_scale: float = 0.05,
        drop_path: Drop | None = None,
        name: str = "",
    ):
        super().__init__(name)
        self.channels = channels
        eye = np.eye(channels)
        base = spectral_normalized_init(channels, channels, seed)
        if init == "composite":
            m = eye + base
            w = m / np.linalg.norm(m, ord=2) - eye
        elif init == "residual":
            w = residual_scale * base
        elif init == "zeros":
            w = np.zeros((channels, channels))
        else:
            raise ConfigError(f"unknown LiResConv init {init!r}")
        self.weight = _param(w, f"{self.name}.weight")
        self.bias = _param(np.zeros(channels), f"{self.name}.bias")
        self.drop_path = drop_path
        self._pi = _PowerIterationState(channels, seed + 7919)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"pi_v": self._pi.v.copy()}

    def load_buffers(self, state):
        if "pi_v" in state:
            self._pi.v = np.asarray(state["pi_v"], dtype=np.float64).copy()

    def conv(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        out = T.matmul(flat, T.transpose(self.weight))
        return T.transpose(T.reshape(out, (n, h, w, c)), (0, 3, 1, 2))

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"LiResConv expects [N, {self.channels}, H, W], got {x.shape}")
        branch = self.conv(x)
        if self.drop_path is not None:
            branch = self.drop_path(branch, training, rng)
        return T.add(T.add(x, branch), _along_axis(self.bias, x, 1))

    def composite_matrix(self) -> np.ndarray:
        return np.eye(self.channels) + np.asarray(self.weight.data, dtype=np.float64)

    def bound_estimate(self, input_shape=None):
        op = LinearOperator.from_matrix(self.composite_matrix())
        return power_iteration(op, BOUND_MAX_ITERS, BOUND_TOL, seed=hash_name(self.name))

    def bound_tensor(self, input_shape=None, update=True, iters: int = 1):
        eye = Tensor(np.eye(self.channels), dtype=self.weight.dtype)
        return self._pi.sigma_tensor(T.add(eye, self.weight), iters, update)


# ---------------------------------------------------------------------------
# Patch embedding / merging


class PatchEmbed(Layer):
    """Non-overlapping ``p x p`` patches projected to ``out_channels``.

    Each flattened patch (channel-major, then row, then column) is mapped by
    ``proj^T``.  Distinct patches do not interact, so the bound is the largest
    singular value of the projection matrix.
    """

    kind = "patch_embed"
    linear = True

    def __init__(self, in_channels: int, out_channels: int, patch_size: int, seed: int = 0, name: str = ""):
        super().__init__(name)
        if patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {patch_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.patch_size = patch_size
        fan_in = in_channels * patch_size * patch_size
        self.proj = _param(spectral_normalized_init(fan_in, out_channels, seed), f"{self.name}.proj")
        self.bias = _param(np.zeros(out_channels), f"{self.name}.bias")
        self._pi = _PowerIterationState(fan_in, seed + 7919)

    def parameters(self):
        return {"proj": self.proj, "bias": self.bias}

    def buffers(self):
        return {"pi_v": self._pi.v.copy()}

    def load_buffers(self, state):
        if "pi_v" in state:
            self._pi.v = np.asarray(state["pi_v"], dtype=np.float64).copy()

    def output_shape(self, input_shape):
        c, h, w = input_shape
        p = self.patch_size
        return (self.out_channels, h // p, w // p)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"PatchEmbed expects [N, {self.in_channels}, H, W], got {x.shape}")
        n, c, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise DimensionError(f"spatial size {h}x{w} not divisible by patch size {p}")
        hp, wp = h // p, w // p
        patches = T.reshape(x, (n, c, hp, p, wp, p))
        patches = T.reshape(T.transpose(patches, (0, 2, 4, 1, 3, 5)), (n * hp * wp, c * p * p))
        out = T.reshape(T.matmul(patches, self.proj), (n, hp, wp, self.out_channels))
        out = T.transpose(out, (0, 3, 1, 2))
        return T.add(out, _along_axis(self.bias, out, 1))

    def bound_estimate(self, input_shape=None):
        op = LinearOperator.from_matrix(np.asarray(self.proj.data, dtype=np.float64).T)
        return power_iteration(op, BOUND_MAX_ITERS, BOUND_TOL, seed=hash_name(self.name))

    def bound_tensor(self, input_shape=None, update=True, iters: int = 1):
        return self._pi.sigma_tensor(T.transpose(self.proj), iters, update)


# ---------------------------------------------------------------------------
# Average pooling


class AvgPool(Layer):
    """Non-overlapping ``k x k`` mean pooling, or global pooling over H x W.

    Output keeps rank 4 (``[N, C, 1, 1]`` for global pooling).
    """

    kind = "avgpool"
    linear = True

    def __init__(self, kernel: int = 2, global_pool: bool = False, name: str = ""):
        super().__init__(name)
        if not global_pool and kernel < 1:
            raise ConfigError(f"kernel must be >= 1, got {kernel}")
        self.kernel = kernel
        self.global_pool = global_pool

    def _window(self, h: int, w: int) -> tuple[int, int]:
        if self.global_pool:
            return h, w
        k = self.kernel
        if h % k or w % k:
            raise DimensionError(f"spatial size {h}x{w} not divisible by pool kernel {k}")
        return k, k

    def output_shape(self, input_shape):
        c, h, w = input_shape
        kh, kw = self._window(h, w)
        return (c, h // kh, w // kw)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise DimensionError(f"AvgPool expects [N, C, H, W], got {x.shape}")
        n, c, h, w = x.shape
        kh, kw = self._window(h, w)
        blocks = T.reshape(x, (n, c, h // kh, kh, w // kw, kw))
        return T.mean(blocks, (3, 5))

    def operator(self, input_shape) -> LinearOperator:
        c, h, w = input_shape
        kh, kw = self._window(h, w)
        out_shape = (c, h // kh, w // kw)

        def apply(x):
            return x.reshape(c, h // kh, kh, w // kw, kw).mean(axis=(2, 4))

        def apply_t(u):
            up = np.repeat(np.repeat(u, kh, axis=1), kw, axis=2)
            return up / (kh * kw)

        return LinearOperator(apply, apply_t, tuple(input_shape), out_shape)

    def bound_estimate(self, input_shape=None):
        """Exact norm ``1 / sqrt(kh * kw)``: each output averages its own window."""
        if input_shape is None:
            raise DimensionError("AvgPool bound needs the input shape")
        _, h, w = input_shape
        kh, kw = self._window(h, w)
        return SigmaEstimate(1.0 / float(np.sqrt(kh * kw)), 0, True, 0.0)


# ---------------------------------------------------------------------------
# LLN head


class LLNHead(Layer):
    """Linear head whose weight rows are normalized to unit l2 norm on every call."""

    kind = "lln"

    def __init__(self, in_features: int, num_classes: int, seed: int = 0, name: str = ""):
        super().__init__(name)
        self.in_features = in_features
        self.num_classes = num_classes
        w = np.random.default_rng(seed).standard_normal((num_classes, in_features))
        self.weight = _param(w, f"{self.name}.weight")
        self.bias = _param(np.zeros(num_classes), f"{self.name}.bias")

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, input_shape):
        return (self.num_classes,)

    def normalized_weight(self) -> Tensor:
        w = self.weight
        sq = T.tsum(T.mul(w, w), 1, keepdims=True)
        degenerate = sq.data <= 0.0
        if degenerate.any():
            rows = np.flatnonzero(degenerate.reshape(-1)).tolist()
            warnings.warn(f"LLN head rows {rows} have zero norm; using them unnormalized", RuntimeWarning)
            sq = T.add(sq, Tensor(degenerate.astype(float), dtype=w.dtype))
        return T.div(w, T.broadcast_to(T.sqrt(sq), w.shape))

    def forward(self, x, training=False, rng=None):
        feats = T.reshape(x, (x.shape[0], -1))
        if feats.shape[1] != self.in_features:
            raise DimensionError(f"LLN head expects {self.in_features} features, got {feats.shape[1]}")
        logits = T.matmul(feats, T.transpose(self.normalized_weight()))
        return T.add(logits, T.broadcast_to(T.reshape(self.bias, (1, -1)), logits.shape))

    def pair_constants(self) -> np.ndarray:
        """Matrix of ``||w_i - w_j||`` over normalized rows (float64)."""
        with T.no_grad():
            w = np.asarray(self.normalized_weight().data, dtype=np.float64)
        diff = w[:, None, :] - w[None, :, :]
        k = np.sqrt(np.sum(diff * diff, axis=-1))
        np.fill_diagonal(k, 0.0)
        return k

    def pair_constants_tensor(self) -> Tensor:
        """Differentiable pair constants; a 1e-12 floor keeps sqrt smooth."""
        w = self.normalized_weight()
        c, d = w.shape
        a = T.broadcast_to(T.reshape(w, (c, 1, d)), (c, c, d))
        b = T.broadcast_to(T.reshape(w, (1, c, d)), (c, c, d))
        diff = T.sub(a, b)
        sq = T.tsum(T.mul(diff, diff), 2)
        k = T.sqrt(T.add(sq, 1e-12))
        return T.mul(k, Tensor(1.0 - np.eye(c), dtype=k.dtype))

    def bound_estimate(self, input_shape=None):
        # l2 bound of the whole logit vector; certification uses pair_constants instead
        with T.no_grad():
            w = np.asarray(self.normalized_weight().data, dtype=np.float64)
        return power_iteration(LinearOperator.from_matrix(w), BOUND_MAX_ITERS, BOUND_TOL, seed=hash_name(self.name))


def hash_name(name: str) -> int:
    """Stable small seed derived from a layer name."""
    h = 2166136261
    for ch in name.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def layer_operator(layer: Layer, input_shape: tuple[int, ...]) -> LinearOperator:
    """Linear part of an affine layer on one sample, with the transpose from the tape.

    ``apply(x) = f(x) - f(0)`` and ``apply_transpose(u)`` is the vector-Jacobian
    product at zero.  Only meaningful for layers that are affine.
    """
    input_shape = tuple(input_shape)
    with T.default_dtype(np.float64), T.no_grad():
        zero = layer.forward(Tensor(np.zeros((1,) + input_shape)), False).data[0].astype(np.float64)
    out_shape = zero.shape

    def apply(x):
        with T.default_dtype(np.float64), T.no_grad():
            y = layer.forward(Tensor(np.asarray(x).reshape((1,) + input_shape)), False).data[0]
        return np.asarray(y, dtype=np.float64) - zero

    def apply_t(u):
        params = list(layer.parameters().values())
        saved = [(p.requires_grad, p.grad) for p in params]
        for p in params:
            p.requires_grad = False
        try:
            with T.default_dtype(np.float64):
                x = Tensor(np.zeros((1,) + input_shape), requires_grad=True)
                y = layer.forward(x, False)
                T.backward(T.tsum(T.mul(y, Tensor(np.asarray(u).reshape(y.shape)))))
        finally:
            for p, (rg, g) in zip(params, saved):
                p.requires_grad, p.grad = rg, g
        return np.asarray(x.grad[0], dtype=np.float64)

    return LinearOperator(apply, apply_t, input_shape, out_shape)


def empirical_ratio(fn, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pair ``||f(x) - f(y)|| / ||x - y||`` for batches of inputs."""
    with T.no_grad():
        fx = np.asarray(fn(Tensor(x)).data, dtype=np.float64)
        fy = np.asarray(fn(Tensor(y)).data, dtype=np.float64)
    num = np.linalg.norm((fx - fy).reshape(len(x), -1), axis=1)
    den = np.linalg.norm((np.asarray(x, np.float64) - y).reshape(len(x), -1), axis=1)
    return num / den


__all__ = [
    "Layer",
    "CenterNorm",
    "MaxMin",
    "Shift",
    "Drop",
    "LiResConv",
    "PatchEmbed",
    "AvgPool",
    "LLNHead",
    "layer_operator",
    "empirical_ratio",
    "hash_name",
    "BOUND_MAX_ITERS",
    "BOUND_TOL",
]
