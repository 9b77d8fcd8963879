"""From-scratch tensor/layer core: conv, batchnorm, pooling, residual blocks.

Everything runs in double precision on plain numpy arrays shaped
(batch, channels, height, width). Parameters live in one nested structure
(a list over layers of dicts of arrays); gradients and momentum buffers
mirror that structure minus the batchnorm running statistics, which are
updated by train-mode forward passes, not by the optimizer.

Convolution forward and both backward passes are expressed as im2col
matmuls (the input gradient goes through a dilate + full-correlation
rewrite), so there is no per-element scatter on the training path. The
test suite checks every layer's analytic gradient against central finite
differences.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import DataError

# ---------------------------------------------------------------------------
# Layer and model specs


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class BatchNorm:
    channels: int
    momentum: float = 0.1
    epsilon: float = 1e-5


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class ResidualBlock:
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


LayerSpec = Union[Conv, BatchNorm, ReLU, MaxPool, ResidualBlock, GlobalAvgPool, Linear]

_KIND_TO_CLASS = {
    "conv": Conv,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "maxpool": MaxPool,
    "residual_block": ResidualBlock,
    "global_avg_pool": GlobalAvgPool,
    "linear": Linear,
}
_CLASS_TO_KIND = {cls: kind for kind, cls in _KIND_TO_CLASS.items()}


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    layers: tuple[LayerSpec, ...]

    def to_json(self) -> str:
        layers = []
        for layer in self.layers:
            entry: dict[str, Any] = {"kind": _CLASS_TO_KIND[type(layer)]}
            entry.update(layer.__dict__)
            layers.append(entry)
        return json.dumps({"in_channels": self.in_channels, "layers": layers})

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        raw = json.loads(text)
        layers = []
        for entry in raw["layers"]:
            entry = dict(entry)
            cls = _KIND_TO_CLASS[entry.pop("kind")]
            layers.append(cls(**entry))
        return ModelSpec(in_channels=int(raw["in_channels"]), layers=tuple(layers))


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    seed: int = 0
    input_size: int = 224

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")


def mini_resnet(in_channels: int = 3) -> ModelSpec:
    """Desk-scale residual classifier: stem conv, two residual blocks, 2-way head."""
    return ModelSpec(
        in_channels=in_channels,
        layers=(
            Conv(out_channels=8, kernel=3, stride=1, pad=1),
            BatchNorm(channels=8),
            ReLU(),
            ResidualBlock(channels=8, stride=1),
            ResidualBlock(channels=16, stride=2),
            GlobalAvgPool(),
            Linear(in_features=16, out_features=2),
        ),
    )


# ---------------------------------------------------------------------------
# Parameter layout

Params = list[dict[str, Any]]


def _bn_template(channels: int) -> dict[str, tuple[int, ...]]:
    return {
        "gamma": (channels,),
        "beta": (channels,),
        "running_mean": (channels,),
        "running_var": (channels,),
    }


def _block_needs_projection(in_channels: int, block: ResidualBlock) -> bool:
    return block.stride != 1 or in_channels != block.channels


def param_template(spec: ModelSpec) -> list[dict[str, Any]]:
    """Shapes of every parameter array, in canonical order; validates composition."""
    template: list[dict[str, Any]] = []
    channels = spec.in_channels
    spatial = True
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv, BatchNorm, MaxPool, ResidualBlock)) and not spatial:
            raise ValueError(f"layer {i}: {type(layer).__name__} needs a 4-D input")
        if isinstance(layer, Conv):
            template.append(
                {
                    "w": (layer.out_channels, channels, layer.kernel, layer.kernel),
                    "b": (layer.out_channels,),
                }
            )
            channels = layer.out_channels
        elif isinstance(layer, BatchNorm):
            if layer.channels != channels:
                raise ValueError(
                    f"layer {i}: batchnorm declares {layer.channels} channels, "
                    f"input has {channels}"
                )
            template.append(_bn_template(channels))
        elif isinstance(layer, ResidualBlock):
            entry: dict[str, Any] = {
                "conv1": {
                    "w": (layer.channels, channels, 3, 3),
                    "b": (layer.channels,),
                },
                "bn1": _bn_template(layer.channels),
                "conv2": {
                    "w": (layer.channels, layer.channels, 3, 3),
                    "b": (layer.channels,),
                },
                "bn2": _bn_template(layer.channels),
            }
            if _block_needs_projection(channels, layer):
                entry["proj"] = {
                    "w": (layer.channels, channels, 1, 1),
                    "b": (layer.channels,),
                }
                entry["proj_bn"] = _bn_template(layer.channels)
            template.append(entry)
            channels = layer.channels
        elif isinstance(layer, GlobalAvgPool):
            template.append({})
            spatial = False
        elif isinstance(layer, Linear):
            if spatial:
                raise ValueError(
                    f"layer {i}: linear needs a 2-D input (insert global_avg_pool)"
                )
            if layer.in_features != channels:
                raise ValueError(
                    f"layer {i}: linear declares {layer.in_features} inputs, "
                    f"got {channels}"
                )
            template.append(
                {"w": (layer.in_features, layer.out_features), "b": (layer.out_features,)}
            )
            channels = layer.out_features
        else:  # ReLU / MaxPool carry no parameters
            template.append({})
    last = spec.layers[-1] if spec.layers else None
    if not isinstance(last, Linear) or last.out_features != 2:
        raise ValueError("final layer must be linear with 2 outputs")
    return template


def _iter_arrays(entry: dict[str, Any], prefix: tuple[str, ...] = ()):
    """Yield (path, value) for every array shape/array in canonical key order."""
    order = ("w", "b", "gamma", "beta", "running_mean", "running_var",
             "conv1", "bn1", "conv2", "bn2", "proj", "proj_bn")
    for key in order:
        if key not in entry:
            continue
        value = entry[key]
        if isinstance(value, dict):
            yield from _iter_arrays(value, prefix + (key,))
        else:
            yield prefix + (key,), value


def iter_param_arrays(params: Params):
    """Canonical (layer_index, path, array) walk used by init and checkpoints."""
    for i, entry in enumerate(params):
        for path, value in _iter_arrays(entry):
            yield i, path, value


def init_params(spec: ModelSpec, seed: int) -> Params:
    """He-style uniform init: weights ~ U(-b, b) with b = sqrt(6 / fan_in).

    Biases start at zero, batchnorm at scale 1 / shift 0 with running mean 0
    and variance 1. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    params: Params = []
    for entry in param_template(spec):
        params.append(_init_entry(entry, rng))
    return params


def _init_entry(template: dict[str, Any], rng: np.random.Generator) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in _sorted_entry_items(template):
        if isinstance(value, dict):
            out[key] = _init_entry(value, rng)
        elif key == "w":
            fan_in = int(np.prod(value[1:])) if len(value) == 4 else value[0]
            bound = np.sqrt(6.0 / fan_in)
            out[key] = rng.uniform(-bound, bound, size=value)
        elif key in ("b", "beta", "running_mean"):
            out[key] = np.zeros(value)
        elif key in ("gamma", "running_var"):
            out[key] = np.ones(value)
        else:
            raise AssertionError(f"unknown parameter key {key}")
    return out


def _sorted_entry_items(entry: dict[str, Any]):
    order = ("w", "b", "gamma", "beta", "running_mean", "running_var",
             "conv1", "bn1", "conv2", "bn2", "proj", "proj_bn")
    return [(k, entry[k]) for k in order if k in entry]


# ---------------------------------------------------------------------------
# Layer primitives (each returns (output, cache); backward inverts one cache)


class _BufferPool:
    """Reusable large-array arena.

    Fresh multi-MB numpy allocations go through mmap and pay first-touch
    page faults every training step; recycling buffers avoids that. A pool
    hands out distinct buffers per shape within one generation; reset()
    starts the next generation and lets earlier buffers be reused.
    """

    def __init__(self) -> None:
        self._pools: dict[tuple[int, ...], list[np.ndarray]] = {}
        self._used: dict[tuple[int, ...], int] = {}

    def reset(self) -> None:
        self._used.clear()

    def get(self, shape: tuple[int, ...]) -> np.ndarray:
        index = self._used.get(shape, 0)
        pool = self._pools.setdefault(shape, [])
        if index == len(pool):
            pool.append(np.empty(shape))
        self._used[shape] = index + 1
        return pool[index]


class _Workspace(threading.local):
    """Per-thread buffers: `persistent` lives across one forward/backward
    pair (im2col patch tensors cached for the backward pass); `scratch` is
    only valid within a single layer-backward call. The generation counter
    lets backward() reject caches whose buffers a newer forward reused."""

    def __init__(self) -> None:
        self.persistent = _BufferPool()
        self.scratch = _BufferPool()
        self.generation = 0


_workspace = _Workspace()


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int, pool: _BufferPool | None = None):
    """Patch tensor of shape (batch, kernel*kernel*channels, h_out*w_out).

    Row order within a sample is (tap_row, tap_col, channel). Each kernel
    tap is one contiguous slab copy, which beats a single 6-D gather by a
    wide margin; the weight matrix on the matmul side is reordered to match.
    """
    n, c, h, w = x.shape
    h_out = (h + 2 * pad - kernel) // stride + 1
    w_out = (w + 2 * pad - kernel) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"spatial input {h}x{w} too small for kernel {kernel}, "
            f"stride {stride}, pad {pad}"
        )
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    shape = (n, kernel, kernel, c, h_out, w_out)
    cols = np.empty(shape) if pool is None else pool.get(shape)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, ki, kj] = x[
                :, :, ki : ki + h_out * stride : stride, kj : kj + w_out * stride : stride
            ]
    return cols.reshape(n, kernel * kernel * c, h_out * w_out), h_out, w_out


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """(out_channels, tap_row * tap_col * in_channels), matching _im2col rows."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]).T)


def conv_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int,
    pad: int,
    pool: _BufferPool | None = None,
):
    n = x.shape[0]
    out_c, _, kernel, _ = w.shape
    cols, h_out, w_out = _im2col(x, kernel, stride, pad, pool)
    y = np.matmul(_weight_matrix(w)[None, :, :], cols)
    y = y.reshape(n, out_c, h_out, w_out)
    y += b[None, :, None, None]
    cache = (x.shape, cols, w, stride, pad)
    return y, cache


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int):
    """dL/dx: one gemm into patch-gradient space, then per-tap slab adds.

    This is col2im with the scatter expressed as kernel*kernel strided
    in-place additions, mirroring the slab copies of _im2col.
    """
    n, c, h, w_in = x_shape
    out_c, _, kernel, _ = w.shape
    h_out, w_out = dy.shape[2], dy.shape[3]
    # w2[(ki, kj, ci), co] = w[co, ci, ki, kj]
    w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, out_c))
    _workspace.scratch.reset()
    dcols_shape = (n, kernel * kernel * c, h_out * w_out)
    dcols = np.matmul(
        w2[None, :, :],
        dy.reshape(n, out_c, h_out * w_out),
        out=_workspace.scratch.get(dcols_shape),
    )
    dcols = dcols.reshape(n, kernel, kernel, c, h_out, w_out)
    h_pad, w_pad = h + 2 * pad, w_in + 2 * pad
    dxp = np.zeros((n, c, h_pad, w_pad))
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[
                :, :, ki : ki + h_out * stride : stride, kj : kj + w_out * stride : stride
            ] += dcols[:, ki, kj]
    if pad:
        dxp = np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w_in])
    return dxp


def conv_backward(dy: np.ndarray, cache, need_dx: bool = True):
    x_shape, cols, w, stride, pad = cache
    out_c, _, kernel, _ = w.shape
    n = dy.shape[0]
    dy_flat = dy.reshape(n, out_c, -1)
    db = dy.sum(axis=(0, 2, 3))
    dw_flat = np.matmul(dy_flat, cols.transpose(0, 2, 1)).sum(axis=0)
    # invert the (tap_row, tap_col, channel) column order back to (out, in, kh, kw)
    dw = np.ascontiguousarray(
        dw_flat.reshape(out_c, kernel, kernel, -1).transpose(0, 3, 1, 2)
    )
    dx = _conv_input_grad(dy, w, x_shape, stride, pad) if need_dx else None
    return dx, dw, db


def bn_forward(
    x: np.ndarray,
    layer_params: dict[str, np.ndarray],
    epsilon: float,
    momentum: float,
    mode: str,
):
    """Per-channel batch normalization over (batch, height, width).

    Train mode normalizes by batch statistics and folds them into the
    running statistics in place; eval mode uses the stored running
    statistics and touches nothing.
    """
    gamma, beta = layer_params["gamma"], layer_params["beta"]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = np.einsum("nchw->c", x) / m
        var = np.einsum("nchw,nchw->c", x, x) / m - mean * mean
        np.maximum(var, 0.0, out=var)  # guard tiny negative from cancellation
        layer_params["running_mean"] *= 1.0 - momentum
        layer_params["running_mean"] += momentum * mean
        layer_params["running_var"] *= 1.0 - momentum
        layer_params["running_var"] += momentum * var
    else:
        mean = layer_params["running_mean"]
        var = layer_params["running_var"]
    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = x - mean[None, :, None, None]
    x_hat *= inv_std[None, :, None, None]
    y = x_hat * gamma[None, :, None, None]
    y += beta[None, :, None, None]
    return y, (mode, x_hat, inv_std, gamma)


def bn_backward(dy: np.ndarray, cache):
    mode, x_hat, inv_std, gamma = cache
    dgamma = np.einsum("nchw,nchw->c", dy, x_hat)
    dbeta = np.einsum("nchw->c", dy)
    if mode == "eval":
        dx = dy * (gamma * inv_std)[None, :, None, None]
        return dx, dgamma, dbeta
    m = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    # dx = (gamma * inv_std / m) * (m*dy - dbeta - x_hat * dgamma)
    dx = x_hat * (-dgamma / m)[None, :, None, None]
    dx += dy
    dx -= (dbeta / m)[None, :, None, None]
    dx *= (gamma * inv_std)[None, :, None, None]
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray):
    return dy * mask


def maxpool_forward(x: np.ndarray, kernel: int, stride: int):
    n, c, h, w = x.shape
    h_out = (h - kernel) // stride + 1
    w_out = (w - kernel) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"spatial input {h}x{w} too small for pool kernel {kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride].reshape(n, c, h_out, w_out, kernel * kernel)
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, kernel, stride, arg)


def maxpool_backward(dy: np.ndarray, cache):
    x_shape, kernel, stride, arg = cache
    n, c, h, w = x_shape
    h_out, w_out = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape)
    rows = (np.arange(h_out) * stride)[None, None, :, None] + arg // kernel
    cols = (np.arange(w_out) * stride)[None, None, None, :] + arg % kernel
    n_idx = np.arange(n)[:, None, None, None]
    c_idx = np.arange(c)[None, :, None, None]
    np.add.at(dx, (n_idx, c_idx, rows, cols), dy)
    return dx


def gap_forward(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dy: np.ndarray, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None], x_shape) / (h * w)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def residual_forward(
    x: np.ndarray,
    layer: ResidualBlock,
    layer_params: dict[str, Any],
    mode: str,
    pool: _BufferPool | None = None,
):
    """conv-bn-relu-conv-bn plus a skip path, then a final relu.

    The skip is the identity when shape allows, otherwise a 1x1 projection
    conv with its own batchnorm.
    """
    p = layer_params
    h1, c_conv1 = conv_forward(x, p["conv1"]["w"], p["conv1"]["b"], layer.stride, 1, pool)
    h1, c_bn1 = bn_forward(h1, p["bn1"], 1e-5, 0.1, mode)
    h1, c_relu1 = relu_forward(h1)
    h2, c_conv2 = conv_forward(h1, p["conv2"]["w"], p["conv2"]["b"], 1, 1, pool)
    h2, c_bn2 = bn_forward(h2, p["bn2"], 1e-5, 0.1, mode)
    if "proj" in p:
        skip, c_proj = conv_forward(x, p["proj"]["w"], p["proj"]["b"], layer.stride, 0, pool)
        skip, c_proj_bn = bn_forward(skip, p["proj_bn"], 1e-5, 0.1, mode)
    else:
        skip, c_proj, c_proj_bn = x, None, None
    y, c_relu2 = relu_forward(h2 + skip)
    cache = (c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_proj, c_proj_bn, c_relu2)
    return y, cache


def residual_backward(dy: np.ndarray, cache):
    c_conv1, c_bn1, c_relu1, c_conv2, c_bn2, c_proj, c_proj_bn, c_relu2 = cache
    grads: dict[str, Any] = {}
    d_sum = relu_backward(dy, c_relu2)
    d_h2, dgamma2, dbeta2 = bn_backward(d_sum, c_bn2)
    grads["bn2"] = {"gamma": dgamma2, "beta": dbeta2}
    d_h1, dw2, db2 = conv_backward(d_h2, c_conv2)
    grads["conv2"] = {"w": dw2, "b": db2}
    d_h1 = relu_backward(d_h1, c_relu1)
    d_h1, dgamma1, dbeta1 = bn_backward(d_h1, c_bn1)
    grads["bn1"] = {"gamma": dgamma1, "beta": dbeta1}
    dx, dw1, db1 = conv_backward(d_h1, c_conv1)
    grads["conv1"] = {"w": dw1, "b": db1}
    if c_proj is not None:
        d_skip, dgamma_p, dbeta_p = bn_backward(d_sum, c_proj_bn)
        grads["proj_bn"] = {"gamma": dgamma_p, "beta": dbeta_p}
        d_skip, dw_p, db_p = conv_backward(d_skip, c_proj)
        grads["proj"] = {"w": dw_p, "b": db_p}
        dx = dx + d_skip
    else:
        dx = dx + d_sum
    return dx, grads


# ---------------------------------------------------------------------------
# Whole-model forward / backward


def forward(params: Params, spec: ModelSpec, x: np.ndarray, mode: str = "eval"):
    """Run the network; returns (logits, cache for backward).

    Train mode uses batch statistics for batchnorm and updates the running
    statistics stored in `params`; eval mode is a pure function of its
    inputs.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(
            f"expected input shape (batch, {spec.in_channels}, H, W), got {x.shape}"
        )
    if len(params) != len(spec.layers):
        raise ValueError(
            f"params has {len(params)} layers, spec has {len(spec.layers)}"
        )
    # im2col buffers are recycled across forward passes; the generation tag
    # lets backward() reject a cache whose buffers a newer forward reused
    _workspace.persistent.reset()
    _workspace.generation += 1
    pool = _workspace.persistent
    caches: list[Any] = []
    for i, layer in enumerate(spec.layers):
        try:
            if isinstance(layer, Conv):
                x, cache = conv_forward(
                    x, params[i]["w"], params[i]["b"], layer.stride, layer.pad, pool
                )
            elif isinstance(layer, BatchNorm):
                x, cache = bn_forward(x, params[i], layer.epsilon, layer.momentum, mode)
            elif isinstance(layer, ReLU):
                x, cache = relu_forward(x)
            elif isinstance(layer, MaxPool):
                x, cache = maxpool_forward(x, layer.kernel, layer.stride)
            elif isinstance(layer, ResidualBlock):
                x, cache = residual_forward(x, layer, params[i], mode, pool)
            elif isinstance(layer, GlobalAvgPool):
                x, cache = gap_forward(x)
            elif isinstance(layer, Linear):
                if x.ndim != 2 or x.shape[1] != layer.in_features:
                    raise ValueError(
                        f"expected (batch, {layer.in_features}) input, got {x.shape}"
                    )
                x, cache = linear_forward(x, params[i]["w"], params[i]["b"])
            else:
                raise ValueError(f"unknown layer spec {layer!r}")
        except ValueError as exc:
            raise ValueError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        caches.append(cache)
    return x, {
        "spec": spec,
        "caches": caches,
        "logits_shape": x.shape,
        "generation": _workspace.generation,
    }


def backward(params: Params, spec: ModelSpec, cache: dict, dlogits: np.ndarray) -> Params:
    """Exact gradients for every trainable parameter (running stats excluded)."""
    if cache.get("spec") != spec:
        raise ValueError("cache does not match model spec (stale cache?)")
    if cache.get("generation") != _workspace.generation:
        raise ValueError(
            "stale cache: a newer forward pass reused this cache's buffers"
        )
    caches = cache["caches"]
    if len(caches) != len(spec.layers):
        raise ValueError("cache layer count does not match spec (stale cache?)")
    dx = np.asarray(dlogits, dtype=np.float64)
    if dx.shape != cache["logits_shape"]:
        raise ValueError(
            f"dlogits shape {dx.shape} does not match logits {cache['logits_shape']}"
        )
    grads: Params = [{} for _ in spec.layers]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, Conv):
            # the first layer's input gradient has no consumer
            dx, dw, db = conv_backward(dx, caches[i], need_dx=i > 0)
            grads[i] = {"w": dw, "b": db}
        elif isinstance(layer, BatchNorm):
            dx, dgamma, dbeta = bn_backward(dx, caches[i])
            grads[i] = {"gamma": dgamma, "beta": dbeta}
        elif isinstance(layer, ReLU):
            dx = relu_backward(dx, caches[i])
        elif isinstance(layer, MaxPool):
            dx = maxpool_backward(dx, caches[i])
        elif isinstance(layer, ResidualBlock):
            dx, grads[i] = residual_backward(dx, caches[i])
        elif isinstance(layer, GlobalAvgPool):
            dx = gap_backward(dx, caches[i])
        elif isinstance(layer, Linear):
            dx, dw, db = linear_backward(dx, caches[i], params[i]["w"])
            grads[i] = {"w": dw, "b": db}
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood with max-subtraction stabilization.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be in 0..{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Optimizer


def init_momentum(params: Params) -> Params:
    """Zero velocity buffers for every trainable array."""
    buffers: Params = []
    for entry in params:
        buffers.append(_zero_like_trainable(entry))
    return buffers


def _zero_like_trainable(entry: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in entry.items():
        if key in ("running_mean", "running_var"):
            continue
        if isinstance(value, dict):
            out[key] = _zero_like_trainable(value)
        else:
            out[key] = np.zeros_like(value)
    return out


def sgd_step(params: Params, grads: Params, momentum_buffers: Params, config: TrainConfig) -> Params:
    """In-place SGD with momentum and decoupled-from-stats weight decay.

    g' = g + weight_decay * w;  v <- momentum * v + g';  w <- w - lr * v.
    Batchnorm running statistics never appear in `grads`, so they are
    untouched.
    """
    for layer_params, layer_grads, layer_buf in zip(params, grads, momentum_buffers):
        _sgd_entry(layer_params, layer_grads, layer_buf, config)
    return params


def _sgd_entry(params: dict, grads: dict, buffers: dict, config: TrainConfig) -> None:
    for key, grad in grads.items():
        if isinstance(grad, dict):
            _sgd_entry(params[key], grad, buffers[key], config)
            continue
        g = grad + config.weight_decay * params[key]
        buffers[key] *= config.momentum
        buffers[key] += g
        params[key] -= config.learning_rate * buffers[key]


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_MAGIC = b"MDLP"


def save_checkpoint(path: Path | str, spec: ModelSpec, params: Params) -> None:
    """Magic "MDLP", length-prefixed spec JSON, then f64 LE arrays in spec order."""
    descriptor = spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(descriptor)))
        fh.write(descriptor)
        for _, _, array in iter_param_arrays(params):
            fh.write(np.asarray(array, dtype="<f8").tobytes(order="C"))


def load_checkpoint(path: Path | str) -> tuple[ModelSpec, Params]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(
            f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    (desc_len,) = struct.unpack("<I", data[4:8])
    spec = ModelSpec.from_json(data[8 : 8 + desc_len].decode("utf-8"))
    offset = 8 + desc_len
    params: Params = []
    for entry in param_template(spec):
        params.append({})
        for path_keys, shape in _iter_arrays(entry):
            size = int(np.prod(shape)) * 8
            if offset + size > len(data):
                raise DataError(f"{path}: truncated parameter data")
            array = np.frombuffer(data[offset : offset + size], dtype="<f8").reshape(shape).copy()
            offset += size
            target = params[-1]
            for key in path_keys[:-1]:
                target = target.setdefault(key, {})
            target[path_keys[-1]] = array
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes")
    return spec, params
