"""Differentiable layer primitives: forward passes with explicit caches and
analytic backward passes.

All image tensors are NCHW float arrays (float32 in training, float64 in the
finite-difference test harness). Convolutions use SAME padding: the output
spatial size of a stride-s layer is ceil(in/s), with the total pad split
floor-left / ceil-right. Forward passes return ``(output, cache)``; the cache
is handed back verbatim to ``backward``, which makes multiple outstanding
forward passes through one layer safe (needed when a decoder output and a
prior sample flow through the same network in a single step).
"""

from __future__ import annotations

import numpy as np

TRAIN = "train"
INFER = "infer"

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LRELU_LEAK = 0.2
PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Dimension mismatch, naming the offending axis."""


class CacheError(RuntimeError):
    """Backward called with a missing or mismatched forward cache."""


def _check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")


def same_pad(size: int, stride: int, kernel: int) -> tuple[int, int]:
    """SAME padding for one spatial axis: output size is ceil(size/stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    lo = total // 2
    return lo, total - lo


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Truncated normal init (resample beyond 2 std), DCGAN-style."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def _window_view(x_pad, kernel, stride, oh, ow):
    """Sliding 5x5 windows over a padded NHWC batch: (n, oh, ow, k, k, c)."""
    n, _, _, c = x_pad.shape
    sn, sh, sw, sc = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, oh, ow, kernel, kernel, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def _scatter_windows(cols, n, c, hp, wp, kernel, stride, oh, ow, out):
    """Adjoint of the window gather: sum patch rows back onto a padded image.

    ``cols`` is (n*oh*ow, k*k*c), ``out`` a zeroed (n, hp, wp, c) buffer.
    Loop order over the k*k taps keeps every += a contiguous channel run.
    """
    cols = cols.reshape(n, oh, ow, kernel, kernel, c)
    for ki in range(kernel):
        hi = ki + stride * oh
        for kj in range(kernel):
            wj = kj + stride * ow
            out[:, ki:hi:stride, kj:wj:stride, :] += cols[:, :, :, ki, kj, :]
    return out


class Layer:
    """Base: parameters live in ``params`` (name -> array), non-trainable
    buffers in ``buffers``. Subclasses define kind, forward, backward.

    Large transient arrays (padded inputs, gathered patch columns) are kept in
    per-layer scratch buffers reused across calls; this avoids repeated
    multi-megabyte allocations in the training loop.
    """

    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._scratch: dict = {}
        self._gen = 0

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        raise NotImplementedError

    def backward(self, cache, grad_out, need_param_grads=True):
        raise NotImplementedError

    def out_shape(self, in_shape):
        raise NotImplementedError

    def release_buffers(self):
        self._scratch.clear()

    def _buf(self, tag, shape, dtype, zeroed=False):
        key = (tag, shape, np.dtype(dtype).str)
        buf = self._scratch.get(key)
        if buf is None:
            buf = np.zeros(shape, dtype=dtype) if zeroed else np.empty(shape, dtype=dtype)
            self._scratch[key] = buf
        return buf

    def _take(self, cache):
        if cache is None:
            raise CacheError(f"{self.kind}: backward called without a forward cache")
        return cache


class Conv2d(Layer):
    """5x5 convolution, SAME padding, stride 1 or 2.

    Computes in channels-last order internally (gathered patch rows hit
    contiguous channel runs), converting from/to the NCHW contract at the
    boundary.
    """

    kind = "conv"

    def __init__(self, in_channels, out_channels, stride, kernel=5, rng=None):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"conv stride must be 1 or 2, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.kernel = kernel
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = trunc_normal(rng, (out_channels, in_channels, kernel, kernel))
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv: input channel axis is {c}, layer expects {self.in_channels}"
            )
        return (n, self.out_channels, -(-h // self.stride), -(-w // self.stride))

    def _w_mat(self, dtype):
        # weight rows reordered to the (ki, kj, ci) patch-row layout
        k = self.kernel
        return np.ascontiguousarray(
            self.params["weight"].transpose(2, 3, 1, 0).reshape(k * k * self.in_channels,
                                                                self.out_channels)
        ).astype(dtype, copy=False)

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if x.ndim != 4:
            raise ShapeError(f"conv: expected 4-d NCHW input, got {x.ndim}-d")
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv: input channel axis is {c}, layer expects {self.in_channels}"
            )
        k, s = self.kernel, self.stride
        (pt, pb), (pl, pr) = same_pad(h, s, k), same_pad(w, s, k)
        oh, ow = -(-h // s), -(-w // s)
        x_pad = self._buf("xpad", (n, h + pt + pb, w + pl + pr, c), x.dtype, zeroed=True)
        x_pad[:, pt:pt + h, pl:pl + w, :] = x.transpose(0, 2, 3, 1)
        win = _window_view(x_pad, k, s, oh, ow)
        tag = "cols" if keep_cols else "scratch"
        cols6 = self._buf(tag, (n, oh, ow, k, k, c), x.dtype)
        np.copyto(cols6, win)
        cols = cols6.reshape(n * oh * ow, k * k * c)
        y = cols @ self._w_mat(x.dtype)
        y += self.params["bias"].astype(x.dtype, copy=False)
        y = np.ascontiguousarray(y.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2))
        self._gen += 1
        cache = (cols if keep_cols else None, x.shape, x_pad.shape, oh, ow, x.dtype, self._gen)
        return y, cache

    def backward(self, cache, grad_out, need_param_grads=True):
        cols, x_shape, pad_shape, oh, ow, dtype, gen = self._take(cache)
        n, c, h, w = x_shape
        k, s = self.kernel, self.stride
        co = self.out_channels
        g = self._buf("g", (n, oh, ow, co), dtype)
        np.copyto(g, grad_out.transpose(0, 2, 3, 1))
        g = g.reshape(n * oh * ow, co)
        grads = None
        if need_param_grads:
            if cols is None:
                raise CacheError("conv: cache was built without columns (keep_cols=False)")
            if gen != self._gen:
                raise CacheError(
                    "conv: a later forward overwrote this cache; finish each backward "
                    "before running the layer again"
                )
            gw = (cols.T @ g).reshape(k, k, c, co).transpose(3, 2, 0, 1)
            grads = {"weight": np.ascontiguousarray(gw), "bias": g.sum(axis=0)}
        grad_cols = self._buf("scratch", (n, oh, ow, k, k, c), dtype).reshape(n * oh * ow, -1)
        np.matmul(g, self._w_mat(dtype).T, out=grad_cols)
        gx_pad = self._buf("gxpad", pad_shape, dtype)
        gx_pad[...] = 0
        _scatter_windows(grad_cols, n, c, pad_shape[1], pad_shape[2], k, s, oh, ow, gx_pad)
        pt, _ = same_pad(h, s, k)
        pl, _ = same_pad(w, s, k)
        grad_x = np.ascontiguousarray(
            gx_pad[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
        )
        return grad_x, grads


class TConv2d(Layer):
    """Stride-2 transposed convolution, SAME semantics: output is 2h x 2w.

    Exact adjoint of ``Conv2d`` with tied weights: for weight W of shape
    (in_channels, out_channels, k, k), <conv(a; W'), b> == <a, tconv(b; W)>
    where W' views the same array as a (in->out)-swapped conv kernel.
    """

    kind = "tconv"

    def __init__(self, in_channels, out_channels, stride=2, kernel=5, rng=None):
        super().__init__()
        if stride != 2:
            raise ValueError(f"tconv supports stride 2 only, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.kernel = kernel
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = trunc_normal(rng, (in_channels, out_channels, kernel, kernel))
        self.params["bias"] = np.zeros(out_channels, dtype=np.float32)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"tconv: input channel axis is {c}, layer expects {self.in_channels}"
            )
        return (n, self.out_channels, self.stride * h, self.stride * w)

    def _geometry(self, h, w):
        # geometry of the virtual conv (2h, 2w) -> (h, w) whose adjoint we are
        k, s = self.kernel, self.stride
        oh, ow = s * h, s * w
        (pt, pb), (pl, pr) = same_pad(oh, s, k), same_pad(ow, s, k)
        return oh, ow, pt, pb, pl, pr

    def _w_mat(self, dtype):
        # (ci, k*k*co) with patch-row ordering (ki, kj, co)
        k = self.kernel
        return np.ascontiguousarray(
            self.params["weight"].transpose(0, 2, 3, 1).reshape(self.in_channels,
                                                                k * k * self.out_channels)
        ).astype(dtype, copy=False)

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if x.ndim != 4:
            raise ShapeError(f"tconv: expected 4-d NCHW input, got {x.ndim}-d")
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"tconv: input channel axis is {c}, layer expects {self.in_channels}"
            )
        k, s = self.kernel, self.stride
        oh, ow, pt, pb, pl, pr = self._geometry(h, w)
        xf = self._buf("xf", (n, h, w, c), x.dtype)
        np.copyto(xf, x.transpose(0, 2, 3, 1))
        xf = xf.reshape(n * h * w, c)
        cols = self._buf("scratch", (n * h * w, k * k * self.out_channels), x.dtype)
        np.matmul(xf, self._w_mat(x.dtype), out=cols)
        y_pad = self._buf("ypad", (n, oh + pt + pb, ow + pl + pr, self.out_channels), x.dtype)
        y_pad[...] = 0
        _scatter_windows(cols, n, self.out_channels, y_pad.shape[1], y_pad.shape[2],
                         k, s, h, w, y_pad)
        y = np.ascontiguousarray(y_pad[:, pt:pt + oh, pl:pl + ow, :].transpose(0, 3, 1, 2))
        y += self.params["bias"].astype(x.dtype, copy=False)[None, :, None, None]
        self._gen += 1
        cache = (x if keep_cols else None, x.shape, x.dtype, self._gen)
        return y, cache

    def backward(self, cache, grad_out, need_param_grads=True):
        x, x_shape, dtype, gen = self._take(cache)
        n, c, h, w = x_shape
        k, s = self.kernel, self.stride
        co = self.out_channels
        oh, ow, pt, pb, pl, pr = self._geometry(h, w)
        g_pad = self._buf("gpad", (n, oh + pt + pb, ow + pl + pr, co), dtype, zeroed=True)
        g_pad[:, pt:pt + oh, pl:pl + ow, :] = grad_out.transpose(0, 2, 3, 1)
        win = _window_view(g_pad, k, s, h, w)
        cols6 = self._buf("gcols", (n, h, w, k, k, co), dtype)
        np.copyto(cols6, win)
        cols = cols6.reshape(n * h * w, k * k * co)
        grads = None
        if need_param_grads:
            if x is None:
                raise CacheError("tconv: cache was built without input (keep_cols=False)")
            xf = self._buf("xf_b", (n, h, w, c), dtype)
            np.copyto(xf, x.transpose(0, 2, 3, 1))
            gw = (xf.reshape(n * h * w, c).T @ cols).reshape(c, k, k, co).transpose(0, 3, 1, 2)
            grads = {"weight": np.ascontiguousarray(gw), "bias": grad_out.sum(axis=(0, 2, 3))}
        grad_x = (cols @ self._w_mat(dtype).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(grad_x), grads


class Dense(Layer):
    """Fully connected layer on (n, k) inputs: y = x @ W + b."""

    kind = "fc"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = trunc_normal(rng, (in_features, out_features))
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"fc: expected 2-d (n, features) input, got {len(in_shape)}-d")
        n, k = in_shape
        if k != self.in_features:
            raise ShapeError(f"fc: input feature axis is {k}, layer expects {self.in_features}")
        return (n, self.out_features)

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if x.ndim != 2:
            raise ShapeError(f"fc: expected 2-d (n, features) input, got {x.ndim}-d")
        if x.shape[1] != self.in_features:
            raise ShapeError(
                f"fc: input feature axis is {x.shape[1]}, layer expects {self.in_features}"
            )
        w = self.params["weight"].astype(x.dtype, copy=False)
        y = x @ w
        y += self.params["bias"].astype(x.dtype, copy=False)
        return y, (x if keep_cols else None, x.dtype)

    def backward(self, cache, grad_out, need_param_grads=True):
        x, dtype = self._take(cache)
        grads = None
        if need_param_grads:
            if x is None:
                raise CacheError("fc: cache was built without input (keep_cols=False)")
            # the weight gradient can be large (fc over a conv flatten); write it
            # into one of two rotating buffers so a pair of outstanding passes
            # (reconstruction + prior sample) can still be summed by the caller
            self._gen = (self._gen + 1) % 2
            gw = self._buf(f"gw{self._gen}", self.params["weight"].shape, dtype)
            np.matmul(x.T, grad_out, out=gw)
            grads = {"weight": gw, "bias": grad_out.sum(axis=0)}
        grad_x = grad_out @ self.params["weight"].T.astype(dtype, copy=False)
        return grad_x, grads


class BatchNorm(Layer):
    """Per-channel batch normalization for (n, c) or (n, c, h, w) inputs.

    Train mode uses biased batch statistics and updates running stats with
    momentum 0.9; infer mode standardizes with the running stats. Train mode
    rejects batches of one sample (degenerate variance).
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(num_features, dtype=np.float32)
        self.params["beta"] = np.zeros(num_features, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(num_features, dtype=np.float32)
        self.buffers["running_var"] = np.ones(num_features, dtype=np.float32)

    def out_shape(self, in_shape):
        if in_shape[1] != self.num_features:
            raise ShapeError(
                f"batchnorm: channel axis is {in_shape[1]}, layer expects {self.num_features}"
            )
        return in_shape

    def _expand(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True, update_running=True):
        _check_mode(mode)
        if x.ndim not in (2, 4):
            raise ShapeError(f"batchnorm: expected 2-d or 4-d input, got {x.ndim}-d")
        if x.shape[1] != self.num_features:
            raise ShapeError(
                f"batchnorm: channel axis is {x.shape[1]}, layer expects {self.num_features}"
            )
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        gamma = self.params["gamma"].astype(x.dtype, copy=False)
        beta = self.params["beta"].astype(x.dtype, copy=False)
        if mode == TRAIN:
            if x.shape[0] < 2:
                raise ValueError("batchnorm: train mode needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_running:
                m = self.momentum
                rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
                rm *= m
                rm += (1 - m) * mean.astype(rm.dtype)
                rv *= m
                rv += (1 - m) * var.astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(x.dtype, copy=False)
            var = self.buffers["running_var"].astype(x.dtype, copy=False)
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - self._expand(mean, x.ndim)) * self._expand(inv_std, x.ndim)
        y = self._expand(gamma, x.ndim) * xhat + self._expand(beta, x.ndim)
        cache = (xhat, inv_std, axes, mode, x.dtype)
        return y, cache

    def backward(self, cache, grad_out, need_param_grads=True):
        xhat, inv_std, axes, mode, dtype = self._take(cache)
        gamma = self.params["gamma"].astype(dtype, copy=False)
        sig = "nc->c" if grad_out.ndim == 2 else "nchw->c"
        sig2 = "nc,nc->c" if grad_out.ndim == 2 else "nchw,nchw->c"
        gosum = np.einsum(sig, grad_out)
        goxsum = np.einsum(sig2, grad_out, xhat)
        grads = None
        if need_param_grads:
            grads = {"gamma": goxsum.copy(), "beta": gosum.copy()}
        k = gamma * inv_std
        if mode == INFER:
            return grad_out * self._expand(k, grad_out.ndim), grads
        m = float(np.prod([grad_out.shape[a] for a in axes]))  # weak scalar: no f64 promotion
        # grad_x = k * (grad_out - (gosum + xhat * goxsum) / m), expanded per channel
        grad_x = grad_out - self._expand(goxsum / m, grad_out.ndim) * xhat
        grad_x -= self._expand(gosum / m, grad_out.ndim)
        grad_x *= self._expand(k, grad_out.ndim)
        return grad_x, grads


class Activation(Layer):
    """Elementwise nonlinearity: relu, lrelu (leak 0.2), tanh, or sigmoid."""

    def __init__(self, kind):
        super().__init__()
        if kind not in ("relu", "lrelu", "tanh", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.leak = LRELU_LEAK if kind == "lrelu" else 0.0

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if self.kind == "relu":
            y = np.maximum(x, 0)
            cache = (x >= 0,)
        elif self.kind == "lrelu":
            y = np.where(x >= 0, x, np.asarray(self.leak, dtype=x.dtype) * x)
            cache = (x >= 0,)
        elif self.kind == "tanh":
            y = np.tanh(x)
            cache = (y,)
        else:
            y = 1.0 / (1.0 + np.exp(-x))
            y = y.astype(x.dtype, copy=False)
            cache = (y,)
        return y, cache

    def backward(self, cache, grad_out, need_param_grads=True):
        (saved,) = self._take(cache)
        if self.kind == "relu":
            grad_x = grad_out * saved
        elif self.kind == "lrelu":
            grad_x = grad_out * np.where(saved, grad_out.dtype.type(1.0), grad_out.dtype.type(self.leak))
        elif self.kind == "tanh":
            grad_x = grad_out * (1.0 - saved * saved)
        else:
            grad_x = grad_out * saved * (1.0 - saved)
        return grad_x, None


class Softmax(Layer):
    """Row softmax with max-subtraction stabilization on (n, classes) logits."""

    kind = "softmax"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if x.ndim != 2:
            raise ShapeError(f"softmax: expected 2-d logits, got {x.ndim}-d")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, (y,)

    def backward(self, cache, grad_out, need_param_grads=True):
        (y,) = self._take(cache)
        dot = (grad_out * y).sum(axis=1, keepdims=True)
        return y * (grad_out - dot), None


class Dropout(Layer):
    """Inverted dropout: train-time masking scaled by 1/(1-rate), infer is identity."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0.0 < rate < 1.0:
            raise ValueError(f"dropout rate must be in (0, 1), got {rate}")
        self.rate = rate

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        _check_mode(mode)
        if mode == INFER:
            return x, (None,)
        if rng is None:
            raise ValueError("dropout: train mode requires an rng")
        keep = rng.random(x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        mask = keep.astype(x.dtype) * scale
        return x * mask, (mask,)

    def backward(self, cache, grad_out, need_param_grads=True):
        (mask,) = self._take(cache)
        if mask is None:
            return grad_out, None
        return grad_out * mask, None


class Flatten(Layer):
    """(n, c, h, w) -> (n, c*h*w)."""

    kind = "flatten"

    def out_shape(self, in_shape):
        n = in_shape[0]
        return (n, int(np.prod(in_shape[1:])))

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        return x.reshape(x.shape[0], -1), (x.shape,)

    def backward(self, cache, grad_out, need_param_grads=True):
        (shape,) = self._take(cache)
        return grad_out.reshape(shape), None


class Reshape(Layer):
    """(n, k) -> (n, c, h, w) with k = c*h*w."""

    kind = "reshape"

    def __init__(self, channels, height, width):
        super().__init__()
        self.target = (channels, height, width)

    def out_shape(self, in_shape):
        n, k = in_shape
        if k != int(np.prod(self.target)):
            raise ShapeError(
                f"reshape: feature axis is {k}, expected {int(np.prod(self.target))}"
            )
        return (n,) + self.target

    def forward(self, x, mode=TRAIN, rng=None, keep_cols=True):
        if x.shape[1] != int(np.prod(self.target)):
            raise ShapeError(
                f"reshape: feature axis is {x.shape[1]}, expected {int(np.prod(self.target))}"
            )
        return x.reshape((x.shape[0],) + self.target), (x.shape,)

    def backward(self, cache, grad_out, need_param_grads=True):
        (shape,) = self._take(cache)
        return grad_out.reshape(shape), None
