"""Differentiable layers: same-padded 2-D convolution, batch normalization,
LeakyReLU, tanh, dense, and elementwise add, with hand-written reverse-mode
gradients on numpy arrays.

Layout conventions: activations are (batch, channels, height, width); conv
weights are (filters, in_channels, kernel_h, kernel_w); dense weights are
(out_features, in_features). The training path stores everything in float32.
Layers preserve the dtype of their inputs, so the finite-difference checker
can drive the identical code in float64.

Convolutions with kernels larger than 1x1 run in the frequency domain: both
operands are zero-padded to a 3-smooth grid, multiplied per frequency bin
with a batched channel contraction, inverse-transformed and cropped.  On the
narrow-memory machines this targets that is several times faster than
patch-matrix GEMM for 16-channel 7x7/5x5 kernels.  1x1 kernels reduce to a
plain channel matmul.  Every layer obeys one protocol: ``forward(x, train)``,
``backward(grad_out) -> grad_in`` (accumulating into parameter ``.grad``),
and ``params()``.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from ..errors import ConfigError, DimensionError, StateError
from .core import DTYPE, Parameter, glorot_uniform, require_rank4

_FFT_WORKERS = -1


def _fast_len(n: int) -> int:
    """Smallest 2^a * 3^b >= n (5-smooth FFT sizes measured slower here)."""
    best = 1 << max(0, n - 1).bit_length()
    p3 = 1
    while p3 <= best:
        if p3 >= n:
            best = min(best, p3)
            break
        p2 = 1
        while p3 * p2 < n:
            p2 <<= 1
        best = min(best, p3 * p2)
        p3 *= 3
    return best


def _bin_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-frequency-bin matrix product; operands become (Ph, Pb, m, k) @ (Ph, Pb, k, n)."""
    return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


class Conv2d:
    """Same-size zero-padded 2-D convolution (cross-correlation) with odd kernels."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 name: str = "conv", rng: np.random.Generator | None = None,
                 dtype=DTYPE, init_scale: float = 1.0):
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"conv kernel extents must be odd, got {(kh, kw)}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        fan_in = in_channels * kh * kw
        fan_out = out_channels * kh * kw
        if rng is None:
            w = np.zeros((out_channels, in_channels, kh, kw), dtype)
        else:
            # init_scale < 1 keeps an output head inside the linear range of a
            # following saturating activation at the start of training
            w = glorot_uniform((out_channels, in_channels, kh, kw), fan_in, fan_out, rng, dtype)
            w *= np.asarray(init_scale, dtype)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype))
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def _check_input(self, x: np.ndarray) -> None:
        require_rank4(x, "conv input")
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv input shape {x.shape} incompatible with weight shape "
                f"{self.weight.value.shape}: channel extents differ")

    def _strategy(self) -> str:
        """Pick the cheapest route for this layer's shape.

        1x1 kernels contract channels directly.  Wide-but-shallow layers (few
        input taps, many filters) run as patch-matrix GEMM, where the many-
        channel inverse transform of the frequency route would dominate.
        Everything else runs in the frequency domain.
        """
        kh, kw = self.kernel
        if (kh, kw) == (1, 1):
            return "1x1"
        if self.in_channels * kh * kw <= 128 and self.out_channels >= 16:
            return "gemm"
        return "fft"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        strategy = self._strategy()
        if strategy == "1x1":
            return self._forward_1x1(x, train)
        if strategy == "gemm":
            return self._forward_gemm(x, train)
        return self._forward_fft(x, train)

    def _forward_1x1(self, x: np.ndarray, train: bool) -> np.ndarray:
        b, c, h, w = x.shape
        w2 = self.weight.value[:, :, 0, 0]
        y = np.matmul(w2, x.reshape(b, c, h * w))
        y += self.bias.value[:, None]
        if train:
            self._cache = ("1x1", x)
        return y.reshape(b, self.out_channels, h, w)

    def _forward_fft(self, x: np.ndarray, train: bool) -> np.ndarray:
        b, c, h, w = x.shape
        kh, kw = self.kernel
        ph, pw = _fast_len(h + kh - 1), _fast_len(w + kw - 1)
        xh = sfft.rfft2(x, s=(ph, pw), workers=_FFT_WORKERS)
        wfh = sfft.rfft2(self.weight.value[:, :, ::-1, ::-1], s=(ph, pw), workers=_FFT_WORKERS)
        zh = _bin_matmul(xh.transpose(2, 3, 0, 1), wfh.transpose(2, 3, 1, 0))
        z = sfft.irfft2(zh.transpose(2, 3, 0, 1), s=(ph, pw), workers=_FFT_WORKERS)
        oy, ox = kh // 2, kw // 2
        y = z[:, :, oy:oy + h, ox:ox + w] + self.bias.value[None, :, None, None]
        if train:
            self._cache = ("fft", xh, wfh, x.shape, (ph, pw))
        return y

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        """Accumulate weight/bias gradients; input gradient unless opted out.

        Skipping the input gradient (for a network's first layer) avoids the
        most expensive backward product.
        """
        if self._cache is None:
            raise StateError("conv backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        if cache[0] == "1x1":
            return self._backward_1x1(grad_out, cache[1], need_input_grad)
        if cache[0] == "gemm":
            return self._backward_gemm(grad_out, cache, need_input_grad)
        return self._backward_fft(grad_out, cache, need_input_grad)

    def _forward_gemm(self, x: np.ndarray, train: bool) -> np.ndarray:
        b, c, h, w = x.shape
        kh, kw = self.kernel
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * kh * kw)
        y = cols @ self.weight.value.reshape(self.out_channels, -1).T
        y += self.bias.value
        if train:
            self._cache = ("gemm", cols, x.shape)
        return np.ascontiguousarray(y.reshape(b, h, w, self.out_channels).transpose(0, 3, 1, 2))

    def _backward_gemm(self, grad_out: np.ndarray, cache, need_input_grad: bool):
        _, cols, xshape = cache
        b, c, h, w = xshape
        kh, kw = self.kernel
        ph, pw = kh // 2, kw // 2
        f = self.out_channels
        dz = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(b * h * w, f)
        self.bias.grad += dz.sum(axis=0)
        self.weight.grad += (dz.T @ cols).reshape(self.weight.value.shape)
        if not need_input_grad:
            return None
        dcols = (dz @ self.weight.value.reshape(f, -1)).reshape(b, h, w, c, kh, kw)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, dy, dx]
        return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w])

    def _backward_1x1(self, grad_out: np.ndarray, x: np.ndarray, need_input_grad: bool):
        b, c, h, w = x.shape
        dm = grad_out.reshape(b, self.out_channels, h * w)
        xm = x.reshape(b, c, h * w)
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        self.weight.grad[:, :, 0, 0] += np.matmul(dm, xm.transpose(0, 2, 1)).sum(axis=0)
        if not need_input_grad:
            return None
        dx = np.matmul(self.weight.value[:, :, 0, 0].T, dm)
        return dx.reshape(x.shape)

    def _backward_fft(self, grad_out, cache, need_input_grad: bool):
        _, xh, wfh, xshape, (ph, pw) = cache
        b, c, h, w = xshape
        kh, kw = self.kernel
        oy, ox = kh // 2, kw // 2
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        dz = np.zeros((b, self.out_channels, ph, pw), dtype=grad_out.dtype)
        dz[:, :, oy:oy + h, ox:ox + w] = grad_out
        dzh = sfft.rfft2(dz, workers=_FFT_WORKERS)
        # weight: cross-correlate cached input with the upstream gradient
        gwh = _bin_matmul(dzh.transpose(2, 3, 1, 0), np.conj(xh).transpose(2, 3, 0, 1))
        gwf = sfft.irfft2(gwh.transpose(2, 3, 0, 1), s=(ph, pw), workers=_FFT_WORKERS)
        self.weight.grad += gwf[:, :, kh - 1::-1, kw - 1::-1]
        if not need_input_grad:
            return None
        # data: correlate upstream gradient with the (flipped) kernel spectrum
        dxh = _bin_matmul(dzh.transpose(2, 3, 0, 1), np.conj(wfh).transpose(2, 3, 0, 1))
        dx = sfft.irfft2(dxh.transpose(2, 3, 0, 1), s=(ph, pw), workers=_FFT_WORKERS)
        return np.ascontiguousarray(dx[:, :, :h, :w])


class BatchNorm2d:
    """Per-channel batch normalization over (batch, height, width).

    Train mode standardizes with batch statistics and blends them into
    zero-debiased running averages (the stored accumulators divide by
    1 - momentum^steps at read time, so early inference is not dragged
    toward the zero initialization).  Inference mode uses the running
    statistics and refuses to run before any training update exists.
    """

    def __init__(self, channels: int, name: str = "bn", eps: float = 1e-5,
                 momentum: float = 0.99, dtype=DTYPE):
        if eps <= 0:
            raise ConfigError(f"batch norm epsilon must be positive, got {eps}")
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.zeros(channels, dtype)
        self.steps = 0
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def _check_input(self, x: np.ndarray) -> None:
        require_rank4(x, "batch norm input")
        if x.shape[1] != self.channels:
            raise DimensionError(
                f"batch norm over {self.channels} channels got input shape {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        if train:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            if n < 2:
                raise DimensionError(
                    "train-mode batch norm needs at least 2 values per channel "
                    f"for a defined variance, got input shape {x.shape}")
            mean = x.mean(axis=(0, 2, 3))
            xhat = x - mean[None, :, None, None]
            var = np.einsum("bchw,bchw->c", xhat, xhat) / n
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat *= inv[None, :, None, None]
            y = xhat * self.gamma.value[None, :, None, None]
            y += self.beta.value[None, :, None, None]
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1.0 - m) * mean).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1.0 - m) * var).astype(self.running_var.dtype)
            self.steps += 1
            self._cache = ("train", xhat, inv)
            return y
        mean, var = self.population_stats()
        inv = 1.0 / np.sqrt(var + self.eps)
        a = self.gamma.value * inv
        b = self.beta.value - a * mean
        self._cache = ("infer", a)
        return a[None, :, None, None] * x + b[None, :, None, None]

    def population_stats(self):
        """Debiased running (mean, variance); state error before any update."""
        if self.steps == 0:
            raise StateError("batch norm inference requested before any training update "
                             "initialized the running statistics")
        correction = 1.0 - self.momentum ** self.steps
        return self.running_mean / correction, self.running_var / correction

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("batch norm backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        if cache[0] == "infer":
            raise StateError("backward through inference-mode batch norm is not supported; "
                             "run the forward pass with train=True")
        _, xhat, inv = cache
        n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        self.gamma.grad += np.einsum("bchw,bchw->c", grad_out, xhat)
        self.beta.grad += grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * self.gamma.value[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))
        s2 = np.einsum("bchw,bchw->c", dxhat, xhat)
        correction = xhat * (s2 / n)[None, :, None, None]
        correction += (s1 / n)[None, :, None, None]
        dxhat -= correction
        dxhat *= inv[None, :, None, None]
        return dxhat


class LeakyReLU:
    """Elementwise y = x for x >= 0 and y = slope * x otherwise."""

    def __init__(self, slope: float = 0.3):
        self.slope = float(slope)
        self._mask = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x >= 0
        neg = np.minimum(x, 0)
        neg *= np.asarray(self.slope, dtype=x.dtype)
        y = np.maximum(x, 0)
        y += neg
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("activation backward called without a cached forward pass")
        mask, self._mask = self._mask, None
        scale = mask.astype(grad_out.dtype)
        scale *= np.asarray(1.0 - self.slope, dtype=grad_out.dtype)
        scale += np.asarray(self.slope, dtype=grad_out.dtype)
        scale *= grad_out
        return scale


class Tanh:
    """Elementwise hyperbolic tangent; backward multiplies by 1 - y^2."""

    def __init__(self):
        self._y = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        y = np.tanh(x)
        self._y = y
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._y is None:
            raise StateError("activation backward called without a cached forward pass")
        y, self._y = self._y, None
        t = y * y
        np.subtract(1.0, t, out=t)
        t *= grad_out
        return t


class Dense:
    """Fully connected layer: y = x @ W.T + b."""

    def __init__(self, in_features: int, out_features: int, name: str = "dense",
                 rng: np.random.Generator | None = None, dtype=DTYPE):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features), dtype)
        else:
            w = glorot_uniform((out_features, in_features), in_features, out_features, rng, dtype)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype))
        self._x = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"dense layer expects input (batch, {self.in_features}), got shape {x.shape}")
        if train:
            self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("dense backward called without a cached forward pass")
        x, self._x = self._x, None
        self.weight.grad += grad_out.T @ x
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two same-shaped tensors.

    The backward rule is the identity on both inputs, so callers simply route
    the upstream gradient to each addend unchanged.
    """
    if a.shape != b.shape:
        raise DimensionError(f"residual add of mismatched shapes {a.shape} and {b.shape}")
    return a + b
