"""Convolutional Q-network written directly against numpy.

Parameters live in a flat ``dict`` keyed ``"<layer>.w"`` / ``"<layer>.b"``.
Convolution weights have shape ``(filters, channels, k, k)``; fully
connected weights ``(fan_in, units)``.  Convolutions are "valid" (no
padding).  Activations are carried channel-last internally and flattened in
``(channels, height, width)`` order at the first fully connected layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

CONV = "conv"
FC = "fc"


class ShapeError(ValueError):
    """Input or parameter shape inconsistent with the architecture."""


class StaleCacheError(ValueError):
    """A forward cache was used with a different network than it came from."""


class NonFiniteError(FloatingPointError):
    """NaN or infinity reached a parameter, gradient or loss."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    size: int
    kernel: int = 1
    stride: int = 1
    activation: str = "relu"
    dropout_site: bool = False

    def __post_init__(self):
        if self.kind not in (CONV, FC):
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"layer {self.name}: unknown activation {self.activation!r}")
        if self.size < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError(f"layer {self.name}: sizes must be positive")


@dataclass(frozen=True)
class NetworkArchitecture:
    input_shape: tuple[int, int, int]
    action_count: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.layers:
            raise ValueError("architecture needs at least one layer")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        seen_fc = False
        for layer in self.layers:
            if layer.kind == FC:
                seen_fc = True
            elif seen_fc:
                raise ValueError(f"layer {layer.name}: convolution after a fully connected layer")
        if self.layers[-1].kind != FC or self.layers[-1].size != self.action_count:
            raise ValueError("final layer must be fully connected with action_count units")
        self.unit_shapes()  # raises if a kernel does not fit

    def unit_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, ``(F, H, W)`` for conv and ``(units,)`` for FC."""
        shapes = []
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == CONV:
                if layer.kernel > h or layer.kernel > w:
                    raise ValueError(f"layer {layer.name}: kernel {layer.kernel} larger than input {h}x{w}")
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
                c = layer.size
                shapes.append((c, h, w))
            else:
                shapes.append((layer.size,))
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.input_shape[0]
        flat = int(np.prod(self.input_shape))
        for layer, out in zip(self.layers, self.unit_shapes()):
            if layer.kind == CONV:
                shapes[f"{layer.name}.w"] = (layer.size, fan_in, layer.kernel, layer.kernel)
                fan_in = layer.size
            else:
                shapes[f"{layer.name}.w"] = (flat, layer.size)
            shapes[f"{layer.name}.b"] = (layer.size,)
            flat = int(np.prod(out))
        return shapes

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "action_count": self.action_count,
            "layers": [dataclasses.asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkArchitecture":
        return cls(tuple(d["input_shape"]), int(d["action_count"]),
                   tuple(LayerSpec(**layer) for layer in d["layers"]))


def default_architecture(input_shape, action_count: int) -> NetworkArchitecture:
    """Desk-scale 3 conv + 2 FC network; dropout on the first four layers."""
    return NetworkArchitecture(input_shape, action_count, (
        LayerSpec("conv1", CONV, 8, kernel=3, stride=1, dropout_site=True),
        LayerSpec("conv2", CONV, 16, kernel=3, stride=1, dropout_site=True),
        LayerSpec("conv3", CONV, 16, kernel=3, stride=1, dropout_site=True),
        LayerSpec("fc1", FC, 64, dropout_site=True),
        LayerSpec("fc2", FC, action_count, activation="linear"),
    ))


def micro_fc_architecture(input_shape=(1, 2, 3), action_count: int = 3) -> NetworkArchitecture:
    return NetworkArchitecture(input_shape, action_count, (
        LayerSpec("fc1", FC, 7, dropout_site=True),
        LayerSpec("fc2", FC, action_count, activation="linear"),
    ))


def micro_conv_architecture(input_shape=(2, 6, 6), action_count: int = 3) -> NetworkArchitecture:
    return NetworkArchitecture(input_shape, action_count, (
        LayerSpec("conv1", CONV, 3, kernel=3, stride=1, dropout_site=True),
        LayerSpec("conv2", CONV, 4, kernel=2, stride=2, dropout_site=True),
        LayerSpec("fc1", FC, 6, dropout_site=True),
        LayerSpec("fc2", FC, action_count, activation="linear"),
    ))


PROFILES: dict[str, Callable[..., NetworkArchitecture]] = {
    "default": default_architecture,
    "micro_fc": micro_fc_architecture,
    "micro_conv": micro_conv_architecture,
}


@dataclass(frozen=True)
class RegularizationConfig:
    lambda_l2: float = 0.0
    p_conv: float = 0.0
    p_fc: float = 0.0

    def __post_init__(self):
        if not self.lambda_l2 >= 0:
            raise ValueError(f"lambda_l2 must be >= 0, got {self.lambda_l2}")
        for name in ("p_conv", "p_fc"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {p}")

    @property
    def uses_dropout(self) -> bool:
        return self.p_conv > 0 or self.p_fc > 0


def xavier_init(arch: NetworkArchitecture, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for key, shape in arch.param_shapes().items():
        if key.endswith(".b"):
            params[key] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            f, c, k, _ = shape
            fan_in, fan_out = c * k * k, f * k * k
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[key] = rng.uniform(-limit, limit, size=shape).astype(dtype, copy=False)
    return params


def zeros_like_params(params: Params) -> Grads:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def check_params(params: Params, arch: NetworkArchitecture) -> None:
    expected = arch.param_shapes()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter keys differ from architecture (missing {missing}, unexpected {extra})")
    for key, shape in expected.items():
        if params[key].shape != shape:
            raise ShapeError(f"layer {key.split('.')[0]}: parameter {key} has shape "
                             f"{params[key].shape}, expected {shape}")


@dataclass
class MaskSet:
    """Binary keep-masks per dropout site plus the rate each was drawn at.

    Each mask has shape ``(batch, *unit_shape)`` or just ``unit_shape``.
    Surviving units are scaled by ``1 / (1 - rate)`` when applied.
    """

    keep: dict[str, np.ndarray]
    rates: dict[str, float]

    def scaled(self, name: str) -> np.ndarray:
        return self.keep[name] * (1.0 / (1.0 - self.rates[name]))


def make_dropout_masks(arch: NetworkArchitecture, reg: RegularizationConfig,
                       rng: np.random.Generator, batch_size: Optional[int] = None) -> MaskSet:
    keep, rates = {}, {}
    for layer, shape in zip(arch.layers, arch.unit_shapes()):
        if not layer.dropout_site:
            continue
        p = reg.p_conv if layer.kind == CONV else reg.p_fc
        full = shape if batch_size is None else (batch_size, *shape)
        keep[layer.name] = (rng.random(full) >= p).astype(np.float64)
        rates[layer.name] = p
    return MaskSet(keep, rates)


@dataclass
class ForwardCache:
    arch: NetworkArchitecture
    param_shapes: dict[str, tuple]
    batched: bool
    batch_size: int
    # per layer: (layer input as used by the matmul, input spatial shape, relu mask, dropout scale)
    inputs: list = field(default_factory=list)
    in_shapes: list = field(default_factory=list)
    active: list = field(default_factory=list)
    drop: list = field(default_factory=list)


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    # x is channel-last (N, H, W, C); columns ordered (C, k, k) to match weights
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, -1), ho, wo


def forward(params: Params, arch: NetworkArchitecture, x: np.ndarray,
            masks: Optional[MaskSet] = None) -> tuple[np.ndarray, ForwardCache]:
    """Q-values for one observation ``(C, H, W)`` or a batch ``(N, C, H, W)``."""
    x = np.asarray(x)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        first = arch.layers[0].name
        raise ShapeError(f"layer {first}: input shape {tuple(x.shape[1:])} does not match "
                         f"architecture input {arch.input_shape}")
    dtype = params[f"{arch.layers[0].name}.w"].dtype
    n = x.shape[0]
    cache = ForwardCache(arch, {k: v.shape for k, v in params.items()}, batched, n)
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)
    for layer in arch.layers:
        w = params.get(f"{layer.name}.w")
        b = params.get(f"{layer.name}.b")
        if w is None or b is None:
            raise ShapeError(f"layer {layer.name}: missing parameters")
        if layer.kind == CONV:
            if h.ndim != 4 or w.shape[1] != h.shape[3] or w.shape[2] != layer.kernel:
                raise ShapeError(f"layer {layer.name}: weight shape {w.shape} incompatible "
                                 f"with input channels {h.shape[-1]}")
            cache.in_shapes.append(h.shape)
            cols, ho, wo = _im2col(h, layer.kernel, layer.stride)
            cache.inputs.append(cols)
            z = (cols @ w.reshape(w.shape[0], -1).T + b).reshape(n, ho, wo, -1)
        else:
            if h.ndim == 4:
                h = h.transpose(0, 3, 1, 2).reshape(n, -1)
            if w.shape[0] != h.shape[1]:
                raise ShapeError(f"layer {layer.name}: weight shape {w.shape} incompatible "
                                 f"with {h.shape[1]} inputs")
            cache.in_shapes.append(h.shape)
            cache.inputs.append(h)
            z = h @ w + b
        if layer.activation == "relu":
            active = z > 0
            h = z * active
        else:
            active = None
            h = z
        cache.active.append(active)
        scale = None
        if masks is not None and layer.dropout_site:
            if layer.name not in masks.keep:
                raise ShapeError(f"layer {layer.name}: no dropout mask supplied")
            scale = masks.scaled(layer.name)
            if layer.kind == CONV:
                scale = np.moveaxis(scale, -3, -1)
            try:
                h = h * scale
            except ValueError:
                raise ShapeError(f"layer {layer.name}: dropout mask shape {masks.keep[layer.name].shape} "
                                 f"does not fit activations {h.shape}") from None
        cache.drop.append(scale)
    q = h
    return (q if batched else q[0]), cache


def backward(cache: ForwardCache, arch: NetworkArchitecture, params: Params,
             dq: np.ndarray) -> Grads:
    """Gradients of a scalar loss w.r.t. every parameter, given dLoss/dQ."""
    if cache.arch != arch:
        raise StaleCacheError("cache was produced by a different architecture")
    if {k: v.shape for k, v in params.items()} != cache.param_shapes:
        raise StaleCacheError("parameter shapes changed since the forward pass")
    dq = np.asarray(dq, dtype=cache.inputs[-1].dtype)
    if not cache.batched:
        dq = dq[None]
    if dq.shape != (cache.batch_size, arch.action_count):
        raise StaleCacheError(f"loss gradient shape {dq.shape} does not match cached batch "
                              f"({cache.batch_size}, {arch.action_count})")
    grads: Grads = {}
    g = dq
    n = cache.batch_size
    last = len(arch.layers) - 1
    for i in range(last, -1, -1):
        layer = arch.layers[i]
        w = params[f"{layer.name}.w"]
        if cache.drop[i] is not None:
            g = g * cache.drop[i]
        if cache.active[i] is not None:
            g = g * cache.active[i]
        if layer.kind == CONV:
            f = w.shape[0]
            g2 = g.reshape(-1, f)
            grads[f"{layer.name}.w"] = (g2.T @ cache.inputs[i]).reshape(w.shape)
            grads[f"{layer.name}.b"] = g2.sum(axis=0)
            if i == 0:
                break
            k, s = layer.kernel, layer.stride
            _, ho, wo, _ = g.shape
            dcols = (g2 @ w.reshape(f, -1)).reshape(n, ho, wo, w.shape[1], k, k)
            dx = np.zeros(cache.in_shapes[i], dtype=g.dtype)
            for a in range(k):
                for c in range(k):
                    dx[:, a:a + s * ho:s, c:c + s * wo:s, :] += dcols[..., a, c]
            g = dx
        else:
            grads[f"{layer.name}.w"] = cache.inputs[i].T @ g
            grads[f"{layer.name}.b"] = g.sum(axis=0)
            if i == 0:
                break
            g = g @ w.T
            if arch.layers[i - 1].kind == CONV:
                f, ho, wo = arch.unit_shapes()[i - 1]
                g = g.reshape(n, f, ho, wo).transpose(0, 2, 3, 1)
    return grads


def is_weight(key: str) -> bool:
    return key.endswith(".w")


def l2_term(params: Params, lambda_l2: float) -> tuple[float, Grads]:
    """``lambda * sum(w**2)`` over weight tensors (biases excluded) and its gradient."""
    if lambda_l2 < 0:
        raise ValueError("lambda_l2 must be >= 0")
    penalty = 0.0
    grads = {}
    for key, value in params.items():
        if is_weight(key) and lambda_l2 > 0:
            penalty = penalty + lambda_l2 * np.sum(value * value)
            grads[key] = (2.0 * lambda_l2) * value
        else:
            grads[key] = np.zeros_like(value)
    return penalty, grads


def add_grads(a: Grads, b: Grads) -> Grads:
    return {k: a[k] + b[k] for k in a}


@dataclass
class OptimizerState:
    """RMSProp accumulators (mean of squared gradients) and step constants."""

    accumulators: dict[str, np.ndarray]
    step_size: float = 0.00025
    decay: float = 0.95
    eps: float = 1e-8


def init_optimizer(params: Params, step_size: float = 0.00025, decay: float = 0.95,
                   eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(zeros_like_params(params), step_size, decay, eps)


def optimizer_step(params: Params, grads: Grads, state: OptimizerState) -> None:
    """One RMSProp update, in place on ``params`` and ``state``.

    A non-finite gradient raises before anything is modified.
    """
    for key in params:
        if not np.all(np.isfinite(grads[key])):
            raise NonFiniteError(f"layer {key.split('.')[0]}: non-finite gradient in {key}")
    for key, p in params.items():
        g = grads[key]
        acc = state.accumulators[key]
        acc *= state.decay
        acc += (1.0 - state.decay) * g * g
        p -= state.step_size * g / np.sqrt(acc + state.eps)


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    checked: int
    skipped: int
    tolerance: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_relative_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} params, {self.skipped} skipped at kinks)")


def _loss_parts(params, arch, x, target, masks, lambda_l2):
    q, cache = forward(params, arch, x, masks)
    penalty, _ = l2_term(params, lambda_l2)
    return q - target, penalty, cache


def _same_pattern(a: ForwardCache, b: ForwardCache) -> bool:
    return all(x is None or np.array_equal(x, y) for x, y in zip(a.active, b.active))


def gradient_check(arch: NetworkArchitecture, params: Params, x: np.ndarray,
                   target_q: np.ndarray, reg: RegularizationConfig = RegularizationConfig(),
                   tolerance: float = 1e-6, masks: Optional[MaskSet] = None,
                   h: float = 1e-5, n_samples: int = 200,
                   rng: Optional[np.random.Generator] = None,
                   backward_fn=backward, oracle_dtype=np.longdouble) -> GradCheckReport:
    """Compare analytic gradients of ``sum((q - target)**2) + l2`` with central differences.

    Parameters whose perturbation flips a ReLU are skipped and replaced, since
    the loss is not differentiable there.  Residuals and the penalty are
    differenced term by term before summing.  The relative error of a pair is
    ``|a - n| / max(|a|, |n|)`` and zero when both vanish.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x = np.asarray(x, dtype=np.float64)
    target_q = np.asarray(target_q, dtype=np.float64)

    q, cache = forward(params, arch, x, masks)
    analytic = backward_fn(cache, arch, params, 2.0 * (q - target_q))
    _, l2_grads = l2_term(params, reg.lambda_l2)
    analytic = add_grads(analytic, l2_grads)
    params = {k: v.astype(oracle_dtype) for k, v in params.items()}
    x_o = x.astype(oracle_dtype)
    target_o = target_q.astype(oracle_dtype)
    if masks is not None:
        masks = MaskSet({k: v.astype(oracle_dtype) for k, v in masks.keep.items()}, masks.rates)

    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(offsets[-1])
    worst, checked, skipped = 0.0, 0, 0
    for flat in order:
        if checked >= n_samples:
            break
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[j]
        idx = np.unravel_index(flat - offsets[j], params[key].shape)
        view = params[key]
        orig = view[idx]
        view[idx] = orig + h
        data_plus, pen_plus, c_plus = _loss_parts(params, arch, x_o, target_o, masks, reg.lambda_l2)
        view[idx] = orig - h
        data_minus, pen_minus, c_minus = _loss_parts(params, arch, x_o, target_o, masks, reg.lambda_l2)
        view[idx] = orig
        if not (_same_pattern(cache, c_plus) and _same_pattern(cache, c_minus)):
            skipped += 1
            continue
        # d+^2 - d-^2 taken per output, and the penalty differenced on its
        # own, so neither is swamped by rounding of the full loss value
        data_delta = np.sum((data_plus - data_minus) * (data_plus + data_minus))
        numeric = float((data_delta + (pen_plus - pen_minus)) / (2 * h))
        a = float(analytic[key][idx])
        denom = max(abs(a), abs(numeric))
        err = 0.0 if denom == 0 else abs(a - numeric) / denom
        worst = max(worst, err)
        checked += 1
    return GradCheckReport(worst, worst <= tolerance, checked, skipped, tolerance)
