"""Neural building blocks: convolution, pooling, batch norm, linear,
embeddings and an LSTM cell.

Convolution and pooling are recorded as single tape nodes with
hand-written backward passes (composing them from primitives would
store far too many intermediates at image scale). Everything else is
built from `tensor` primitives and gets its gradient for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, _check, _record

__all__ = [
    "Conv2dSpec", "conv_out_dims", "conv2d", "maxpool",
    "BatchNorm", "ConvLayer", "Linear", "linear",
    "Embedding", "LSTMCell", "lstm_step", "uniform_init",
]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class Conv2dSpec:
    """Shape of one convolution: c filters, k kernel, s stride, p padding."""

    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    batchnorm: bool = False


def conv_out_dims(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    """floor((in + 2p - k)/s) + 1 per axis; raises if degenerate."""
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"window {kernel} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"degenerate output dims {(ho, wo)}")
    return ho, wo


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected CxHxW or BxCxHxW input, got {x.data.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation (no kernel flip) of x with weight (D_out,C,kh,kw)."""
    xd, squeezed = _as_batched(x)
    wd = weight.data
    if wd.ndim != 4:
        raise ShapeError(f"conv weight must be 4-d, got {wd.shape}")
    dout, cin, kh, kw = wd.shape
    if xd.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {xd.shape[1]} channels, weight expects {cin}")
    sh, sw = stride
    ph, pw = padding
    hout, wout = conv_out_dims(xd.shape[2], xd.shape[3], (kh, kw), stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    acc = np.zeros((xd.shape[0], hout, wout, dout))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw]
            acc += np.tensordot(xs, wd[:, :, i, j], axes=([1], [1]))
    if bias is not None:
        acc += bias.data
    out_data = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if squeezed:
        out_data = out_data[0]
    out = Tensor(_check(out_data))

    def bwd(g):
        gb4 = g[None] if squeezed else g
        g_bhwd = gb4.transpose(0, 2, 3, 1)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + sh * hout, sh), slice(j, j + sw * wout, sw))
                xs = xp[sl]
                gw[:, :, i, j] = np.tensordot(
                    g_bhwd, xs, axes=([0, 1, 2], [0, 2, 3]))
                gxp[sl] += np.tensordot(
                    g_bhwd, wd[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph:ph + xd.shape[2], pw:pw + xd.shape[3]]
        if squeezed:
            gx = gx[0]
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, gb4.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def maxpool(x: Tensor, window, stride=None, padding=(0, 0)) -> Tensor:
    """Max over sliding windows; ties route the gradient to the first cell."""
    if stride is None:
        stride = window
    xd, squeezed = _as_batched(x)
    kh, kw = window
    sh, sw = stride
    ph, pw = padding
    hout, wout = conv_out_dims(xd.shape[2], xd.shape[3], window, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                constant_values=-np.inf)
    cols = np.stack(
        [xp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw]
         for i in range(kh) for j in range(kw)], axis=-1)
    idx = cols.argmax(axis=-1)  # argmax takes the first occurrence on ties
    out_data = np.take_along_axis(cols, idx[..., None], axis=-1)[..., 0]
    if squeezed:
        out_data = out_data[0]
        idx = idx[None]  # keep the batched view for backward
    out = Tensor(_check(np.ascontiguousarray(out_data)))

    def bwd(g):
        gb4 = g[None] if squeezed else g
        gxp = np.zeros(xp.shape)
        for p in range(kh * kw):
            i, j = divmod(p, kw)
            gxp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += \
                gb4 * (idx == p)
        gx = gxp[:, :, ph:ph + xd.shape[2], pw:pw + xd.shape[3]]
        if squeezed:
            gx = gx[0]
        return (np.ascontiguousarray(gx),)

    return _record(out, (x,), bwd)


class BatchNorm:
    """Per-channel batch normalization over batch x H x W.

    Train mode standardizes with batch statistics and folds them into
    the running estimates (momentum 0.9); eval mode uses the running
    estimates and refuses to run before any training update.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.momentum = momentum
        self.eps = eps

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"batchnorm mode must be train or eval, got {mode!r}")
        xd, squeezed = _as_batched(x)
        c = self.gamma.data.shape[0]
        if xd.shape[1] != c:
            raise ShapeError(f"batchnorm over {c} channels got input {xd.shape}")
        axes = (0, 2, 3)

        if mode == "train":
            mu = xd.mean(axis=axes)
            var = xd.var(axis=axes)
            if self.running_mean is None:
                self.running_mean = mu.copy()
                self.running_var = var.copy()
            else:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1.0 - m) * mu
                self.running_var = m * self.running_var + (1.0 - m) * var
        else:
            if self.running_mean is None:
                raise RuntimeError(
                    "batchnorm eval requested before any train-mode update")
            mu, var = self.running_mean, self.running_var

        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        y = self.gamma.data[None, :, None, None] * xhat \
            + self.beta.data[None, :, None, None]
        if squeezed:
            y = y[0]
        out = Tensor(_check(y))
        gamma, beta = self.gamma, self.beta
        train = mode == "train"

        def bwd(g):
            gb4 = g[None] if squeezed else g
            ggamma = (gb4 * xhat).sum(axis=axes)
            gbeta = gb4.sum(axis=axes)
            gi = gb4 * (gamma.data * inv)[None, :, None, None]
            if train:
                n = xd.shape[0] * xd.shape[2] * xd.shape[3]
                gi = gi - gi.sum(axis=axes, keepdims=True) / n \
                    - xhat * (gi * xhat).sum(axis=axes, keepdims=True) / n
            gx = gi[0] if squeezed else gi
            return gx, ggamma, gbeta

        return _record(out, (x, gamma, beta), bwd)


class ConvLayer:
    """One Table-style stage: conv, optional batch norm, then ReLU."""

    def __init__(self, in_channels: int, spec: Conv2dSpec,
                 rng: np.random.Generator):
        kh, kw = spec.kernel
        fan_in = in_channels * kh * kw
        self.spec = spec
        self.weight = Tensor(
            uniform_init(rng, (spec.filters, in_channels, kh, kw), fan_in),
            requires_grad=True)
        # bias is redundant under batch norm (beta plays that role)
        self.bias = None if spec.batchnorm else Tensor(
            np.zeros(spec.filters), requires_grad=True)
        self.bn = BatchNorm(spec.filters) if spec.batchnorm else None

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.bn is not None:
            for k, v in self.bn.params().items():
                out["bn." + k] = v
        return out

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        y = conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)
        if self.bn is not None:
            y = self.bn(y, mode)
        return T.relu(y)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.w = Tensor(uniform_init(rng, (in_dim, out_dim), in_dim),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w} if self.b is None else {"w": self.w, "b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class Embedding:
    """Token-id to vector lookup; ids out of range raise IndexError."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 scale: float = 0.1):
        self.table = Tensor(rng.normal(0.0, scale, size=(vocab_size, dim)),
                            requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"table": self.table}

    def __call__(self, ids) -> Tensor:
        return T.gather_rows(self.table, ids)


class LSTMCell:
    """Standard LSTM with fused gate weights, ordered input/forget/output/cell."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        h4 = 4 * hidden_dim
        self.wx = Tensor(uniform_init(rng, (input_dim, h4), hidden_dim),
                         requires_grad=True)
        self.wh = Tensor(uniform_init(rng, (hidden_dim, h4), hidden_dim),
                         requires_grad=True)
        self.b = Tensor(np.zeros(h4), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hd = self.hidden_dim
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise ShapeError(
                f"lstm input must be (B, {self.input_dim}), got {x.data.shape}")
        if h.data.shape != (x.data.shape[0], hd) or c.data.shape != h.data.shape:
            raise ShapeError(
                f"lstm state must be (B, {hd}), got h {h.data.shape} c {c.data.shape}")
        z = T.add(T.add(T.matmul(x, self.wx), T.matmul(h, self.wh)), self.b)
        gi = T.sigmoid(z[:, 0 * hd:1 * hd])
        gf = T.sigmoid(z[:, 1 * hd:2 * hd])
        go = T.sigmoid(z[:, 2 * hd:3 * hd])
        gu = T.tanh(z[:, 3 * hd:4 * hd])
        c_new = T.add(T.mul(gf, c), T.mul(gi, gu))
        h_new = T.mul(go, T.tanh(c_new))
        return h_new, c_new


def lstm_step(cell: LSTMCell, h_prev: Tensor, c_prev: Tensor,
              x: Tensor) -> tuple[Tensor, Tensor]:
    return cell.step(x, h_prev, c_prev)
