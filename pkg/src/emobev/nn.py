"""Layers used by the emotion and behavior networks.

Functional ops (``conv1d``, ``avg_pool1d``, ``adaptive_max_pool1d``,
``gru_layer``, ``gru_cell``, ``dropout``) register their own backward rules
through :func:`emobev.tensor.apply_op`. The module classes wrap them with
parameters, mirroring the usual ``Module``/``forward`` idiom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    _sigmoid_np,
    add_bias,
    apply_op,
    as_tensor,
    matmul,
    mul,
    prelu,
    relu,
    stack,
    take,
)

# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Frames produced by a conv/pool layer: floor((L + 2p - k) / s) + 1."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("kernel and stride must be >= 1, padding >= 0")
    out = (length + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"input of length {length} is shorter than kernel {kernel} after padding")
    return out


@dataclass(frozen=True)
class LayerSpec:
    """Descriptor for one entry of a layer stack."""

    kind: str  # conv, avgpool, relu, prelu, dropout, adaptive_max_pool, linear, gru
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_ch: int | None = None
    out_ch: int | None = None


def _as_spec(layer) -> LayerSpec:
    if isinstance(layer, LayerSpec):
        return layer
    if isinstance(layer, tuple):
        kind, *rest = layer
        return LayerSpec(kind, *rest)
    spec = getattr(layer, "spec", None)
    if callable(spec):
        return spec()
    raise TypeError(f"cannot describe layer {layer!r}")


def receptive_field(stack: Iterable, frame_shift_s: float = 0.010) -> tuple[int, float]:
    """Input frames visible to one output position of the conv/pool prefix.

    Walks layers in order with ``rf += (k - 1) * jump; jump *= s`` and stops at
    the first adaptive max pool; activations and dropout do not change it.
    """
    rf, jump = 1, 1
    for layer in stack:
        spec = _as_spec(layer)
        if spec.kind == "adaptive_max_pool":
            break
        if spec.kind in ("conv", "avgpool"):
            rf += (spec.kernel - 1) * jump
            jump *= spec.stride
        elif spec.kind in ("linear", "gru"):
            raise ValueError(f"{spec.kind} layer before the adaptive max pool")
    return rf, rf * frame_shift_s


def receptive_field_table(stack: Iterable, frame_shift_s: float = 0.010) -> list[dict]:
    """Cumulative receptive field after each conv/pool layer."""
    rows, rf, jump = [], 1, 1
    for i, layer in enumerate(stack):
        spec = _as_spec(layer)
        if spec.kind == "adaptive_max_pool":
            break
        if spec.kind not in ("conv", "avgpool"):
            continue
        rf += (spec.kernel - 1) * jump
        jump *= spec.stride
        rows.append({"index": i, "kind": spec.kind, "kernel": spec.kernel,
                     "stride": spec.stride, "frames": rf, "seconds": rf * frame_shift_s})
    return rows


def check_stack(stack: Sequence, require_single_pool: bool = False) -> None:
    """Raise if adjacent channel counts disagree or the pooling layout is wrong."""
    channels = None
    pools = 0
    for layer in stack:
        spec = _as_spec(layer)
        if spec.kind == "adaptive_max_pool":
            pools += 1
        if spec.in_ch is not None:
            if channels is not None and spec.in_ch != channels:
                raise ShapeError(f"{spec.kind} expects {spec.in_ch} channels, got {channels}")
        if spec.out_ch is not None:
            channels = spec.out_ch
    if require_single_pool and pools != 1:
        raise ShapeError(f"expected exactly one adaptive max pool, found {pools}")


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def conv1d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over time; each kernel spans every input channel.

    x: (B, C_in, L); w: (C_out, C_in, K); b: (C_out,) -> (B, C_out, L_out)
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (batch, channels, time), got {x.shape}")
    B, C, L = x.shape
    O, C2, K = w.shape
    if C != C2:
        raise ShapeError(f"conv expects {C2} input channels, got {C}")
    L_out = output_length(L, K, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    Lp = xp.shape[2]
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :L_out]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * L_out, C * K)
    wmat = w.data.reshape(O, C * K)
    y = cols @ wmat.T
    y += b.data
    out = np.ascontiguousarray(y.reshape(B, L_out, O).transpose(0, 2, 1))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * L_out, O)
        gw = (g2.T @ cols).reshape(O, C, K)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, L_out, C, K)
            gxp = np.zeros((B, C, Lp), dtype=g.dtype)
            span = stride * (L_out - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + span:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + L]
        return gx, gw, gb

    return apply_op(out, (x, w, b), bw, "conv1d")


def avg_pool1d(x, kernel: int, stride: int) -> Tensor:
    """Local average over time; a trailing remainder shorter than the stride is dropped."""
    x = as_tensor(x)
    B, C, L = x.shape
    if L < kernel:
        raise ShapeError(f"avg pool kernel {kernel} longer than input {L}")
    L_out = output_length(L, kernel, stride)
    win = sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride][:, :, :L_out]
    out = win.mean(axis=3)

    def bw(g):
        gx = np.zeros_like(x.data)
        span = stride * (L_out - 1) + 1
        share = g / kernel
        for k in range(kernel):
            gx[:, :, k:k + span:stride] += share
        return (gx,)

    return apply_op(out, (x,), bw, "avg_pool1d")


def adaptive_max_pool1d(x) -> Tensor:
    """Per-channel max over the whole time axis -> (B, C, 1).

    The gradient goes to the first (lowest-index) maximum.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] < 1:
        raise ShapeError(f"adaptive max pool needs a non-empty time axis, got {x.shape}")
    idx = np.argmax(x.data, axis=2)[..., None]
    out = np.take_along_axis(x.data, idx, axis=2)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=2)
        return (gx,)

    return apply_op(out, (x,), bw, "adaptive_max_pool1d")


def dropout(x, p: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.dtype))


# -- GRU --------------------------------------------------------------------
# Gate columns are ordered [reset | update | candidate]. The reset gate scales
# the previous hidden state before the candidate projection.


def _split_hidden(w_hh: np.ndarray, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    return (np.ascontiguousarray(w_hh[:, :2 * hidden]),
            np.ascontiguousarray(w_hh[:, 2 * hidden:]))


def _gru_step(x_t, h, w_ih, w_rz, w_n, b, hidden):
    gi = x_t @ w_ih + b
    rz = _sigmoid_np(gi[:, :2 * hidden] + h @ w_rz)
    r = rz[:, :hidden]
    z = rz[:, hidden:]
    rh = r * h
    n = np.tanh(gi[:, 2 * hidden:] + rh @ w_n)
    h_new = (1.0 - z) * n + z * h
    return h_new, (r, z, n, rh)


def _gru_step_backward(dh, x_t, h_prev, cache, w_ih, w_rz, w_n, grads):
    r, z, n, rh = cache
    gw_ih, gw_rz, gw_n, gb = grads
    dn = dh * (1.0 - z)
    dz = dh * (h_prev - n)
    dh_prev = dh * z
    dan = dn * (1.0 - n * n)
    drh = dan @ w_n.T
    dh_prev += drh * r
    dr = drh * h_prev
    da_rz = np.concatenate([dr * r * (1.0 - r), dz * z * (1.0 - z)], axis=1)
    dh_prev += da_rz @ w_rz.T
    gw_rz += h_prev.T @ da_rz
    gw_n += rh.T @ dan
    dgi = np.concatenate([da_rz, dan], axis=1)
    gw_ih += x_t.T @ dgi
    gb += dgi.sum(axis=0)
    dx = dgi @ w_ih.T
    return dx, dh_prev


def _check_gru_shapes(x_shape, h0, w_ih, w_hh, b):
    hidden = w_hh.shape[0]
    if w_hh.shape != (hidden, 3 * hidden) or w_ih.shape[1] != 3 * hidden or b.shape != (3 * hidden,):
        raise ShapeError("inconsistent GRU weight shapes")
    if x_shape[-1] != w_ih.shape[0]:
        raise ShapeError(f"GRU expects input size {w_ih.shape[0]}, got {x_shape[-1]}")
    if h0.shape != (x_shape[0], hidden):
        raise ShapeError(f"initial hidden state must be {(x_shape[0], hidden)}, got {h0.shape}")
    return hidden


def gru_cell(x, h, w_ih, w_hh, b) -> Tensor:
    """One GRU step: x (B, in), h (B, H) -> (B, H)."""
    x, h, w_ih, w_hh, b = map(as_tensor, (x, h, w_ih, w_hh, b))
    hidden = _check_gru_shapes(x.shape, h, w_ih, w_hh, b)
    w_rz, w_n = _split_hidden(w_hh.data, hidden)
    h_new, cache = _gru_step(x.data, h.data, w_ih.data, w_rz, w_n, b.data, hidden)

    def bw(g):
        grads = (np.zeros_like(w_ih.data), np.zeros_like(w_rz), np.zeros_like(w_n),
                 np.zeros_like(b.data))
        dx, dh = _gru_step_backward(g, x.data, h.data, cache, w_ih.data, w_rz, w_n, grads)
        return dx, dh, grads[0], np.concatenate([grads[1], grads[2]], axis=1), grads[3]

    return apply_op(h_new, (x, h, w_ih, w_hh, b), bw, "gru_cell")


def gru_layer(x, h0, w_ih, w_hh, b) -> Tensor:
    """Run one GRU layer over a whole sequence: x (B, T, in) -> outputs (B, T, H).

    Forward applies exactly the same step kernel as :func:`gru_cell`; the
    backward pass is a single fused backprop-through-time.
    """
    x, h0, w_ih, w_hh, b = map(as_tensor, (x, h0, w_ih, w_hh, b))
    if x.ndim != 3:
        raise ShapeError(f"gru_layer expects (batch, time, features), got {x.shape}")
    hidden = _check_gru_shapes(x.shape, h0, w_ih, w_hh, b)
    B, T, _ = x.shape
    w_rz, w_n = _split_hidden(w_hh.data, hidden)
    xs = [np.ascontiguousarray(x.data[:, t]) for t in range(T)]
    hs = [h0.data]
    caches = []
    h = h0.data
    for t in range(T):
        h, cache = _gru_step(xs[t], h, w_ih.data, w_rz, w_n, b.data, hidden)
        hs.append(h)
        caches.append(cache)
    out = np.stack(hs[1:], axis=1)

    def bw(g):
        grads = (np.zeros_like(w_ih.data), np.zeros_like(w_rz), np.zeros_like(w_n),
                 np.zeros_like(b.data))
        dx = np.zeros_like(x.data)
        dh = np.zeros((B, hidden), dtype=g.dtype)
        for t in reversed(range(T)):
            dh = dh + g[:, t]
            dx[:, t], dh = _gru_step_backward(dh, xs[t], hs[t], caches[t],
                                              w_ih.data, w_rz, w_n, grads)
        return dx, dh, grads[0], np.concatenate([grads[1], grads[2]], axis=1), grads[3]

    return apply_op(out, (x, h0, w_ih, w_hh, b), bw, "gru_layer")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal container: tensors and sub-modules found on attributes are tracked."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def freeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_trainable(self) -> int:
        return int(sum(p.size for p in self.trainable_parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        if kernel < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel and stride must be >= 1, padding >= 0")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel
        self.weight = _uniform(rng, (out_ch, in_ch, kernel), fan_in)
        self.bias = _uniform(rng, (out_ch,), fan_in)

    def spec(self) -> LayerSpec:
        return LayerSpec("conv", self.kernel, self.stride, self.padding, self.in_ch, self.out_ch)

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = _uniform(rng, (in_features, out_features), in_features)
        self.bias = _uniform(rng, (out_features,), in_features)

    def spec(self) -> LayerSpec:
        return LayerSpec("linear", in_ch=self.in_features, out_ch=self.out_features)

    def forward(self, x):
        return add_bias(matmul(x, self.weight), self.bias)


class ReLU(Module):
    def spec(self) -> LayerSpec:
        return LayerSpec("relu")

    def forward(self, x):
        return relu(x)


class PReLU(Module):
    """Leaky rectifier with one learnable slope (initially 0.25)."""

    def __init__(self, init: float = 0.25):
        self.slope = Tensor([init], requires_grad=True)

    def spec(self) -> LayerSpec:
        return LayerSpec("prelu")

    def forward(self, x):
        return prelu(x, self.slope)


class AvgPool1d(Module):
    def __init__(self, kernel: int = 2, stride: int = 2):
        self.kernel, self.stride = kernel, stride

    def spec(self) -> LayerSpec:
        return LayerSpec("avgpool", self.kernel, self.stride)

    def forward(self, x):
        return avg_pool1d(x, self.kernel, self.stride)


class AdaptiveMaxPool1d(Module):
    def spec(self) -> LayerSpec:
        return LayerSpec("adaptive_max_pool")

    def forward(self, x):
        return adaptive_max_pool1d(x)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator | None = None):
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def spec(self) -> LayerSpec:
        return LayerSpec("dropout")

    def forward(self, x):
        return dropout(x, self.p, self.training, self.rng)


class GRU(Module):
    """Stacked unidirectional GRU over (batch, time, features) input."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 1,
                 rng: np.random.Generator | None = None):
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.input_size, self.hidden_size, self.num_layers = input_size, hidden_size, num_layers
        self.w_ih, self.w_hh, self.b = [], [], []
        for layer in range(num_layers):
            n_in = input_size if layer == 0 else hidden_size
            self.w_ih.append(_uniform(rng, (n_in, 3 * hidden_size), hidden_size))
            self.w_hh.append(_uniform(rng, (hidden_size, 3 * hidden_size), hidden_size))
            self.b.append(_uniform(rng, (3 * hidden_size,), hidden_size))

    def spec(self) -> LayerSpec:
        return LayerSpec("gru", in_ch=self.input_size, out_ch=self.hidden_size)

    def forward(self, x, h0=None):
        """Returns (top-layer outputs (B, T, H), final hidden states (layers, B, H))."""
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, T, _ = x.shape
        if T < 1:
            raise ShapeError("empty sequence")
        finals = []
        out = x
        for layer in range(self.num_layers):
            h = Tensor(np.zeros((B, self.hidden_size), dtype=x.dtype)) if h0 is None else h0[layer]
            out = gru_layer(out, h, self.w_ih[layer], self.w_hh[layer], self.b[layer])
            finals.append(take(out, (slice(None), T - 1)))
        return out, stack(finals)

    def step(self, x_t, hidden: Sequence[Tensor]) -> list[Tensor]:
        """Advance every layer one time step; ``hidden`` holds one (B, H) state per layer."""
        new = []
        inp = x_t
        for layer in range(self.num_layers):
            h = gru_cell(inp, hidden[layer], self.w_ih[layer], self.w_hh[layer], self.b[layer])
            new.append(h)
            inp = h
        return new


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
