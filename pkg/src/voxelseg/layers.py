"""Differentiable neural primitives for 3D volumes.

All operations take activations shaped (feature, depth, height, width) with no
batch axis, use valid (unpadded) windows, and record gradient rules on the
active tape. The convolution is cross-correlation (no kernel flip) implemented
as blocked im2col + GEMM so numpy's BLAS does the heavy lifting; the backward
pass reuses the same window matrices for the weight gradient and scatters
through a col2im loop for the input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _convkernels
from .errors import ContractViolationError, ShapeError
from .tensor import Tensor, trace

_AXIS_NAMES = ("depth", "height", "width")

# cap on the im2col scratch matrix (elements); keeps peak memory bounded
_COLS_BUDGET = 1 << 24

# compiled direct kernels handle the unit-stride hot path; flip this off to
# force the blocked-GEMM route (the test suite exercises both)
USE_COMPILED_KERNELS = _convkernels.HAVE_NUMBA


def _conv_out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _check_spatial(x_shape, kernel, stride, in_features, kernel_features):
    if kernel_features != in_features:
        raise ShapeError(
            f"kernel expects {kernel_features} input features, got {in_features}"
        )
    for ax, (n, k) in enumerate(zip(x_shape[1:], kernel)):
        if n < k:
            raise ShapeError(
                f"input {_AXIS_NAMES[ax]} extent {n} is smaller than kernel {k}"
            )
    for s in stride:
        if s < 1:
            raise ContractViolationError(f"strides must be >= 1, got {stride}")


def _im2col(x: np.ndarray, kernel, stride, z0: int, z1: int) -> np.ndarray:
    """Window matrix (C*kd*kh*kw, n_windows) for output depth slices [z0, z1)."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    xs = x[:, z0 * sd : (z1 - 1) * sd + kd]
    win = sliding_window_view(xs, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sd, ::sh, ::sw]
    c = x.shape[0]
    dz, ho, wo = win.shape[1:4]
    return (
        win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * kd * kh * kw, dz * ho * wo),
        (dz, ho, wo),
    )


def _depth_blocks(out_d: int, out_hw: int, row_len: int):
    """Partition output depth so each im2col block stays under the budget."""
    per_slice = max(1, row_len * out_hw)
    zblock = max(1, min(out_d, _COLS_BUDGET // per_slice))
    for z0 in range(0, out_d, zblock):
        yield z0, min(z0 + zblock, out_d)


def _unit_stride_fast_path(x: np.ndarray, stride) -> bool:
    return (
        USE_COMPILED_KERNELS
        and stride == (1, 1, 1)
        and x.flags.c_contiguous
    )


def _conv3d_forward(x: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    k_out, c, kd, kh, kw = w.shape
    od = _conv_out_extent(x.shape[1], kd, stride[0])
    oh = _conv_out_extent(x.shape[2], kh, stride[1])
    ow = _conv_out_extent(x.shape[3], kw, stride[2])
    if _unit_stride_fast_path(x, stride):
        out = np.zeros((k_out, od, oh, ow), dtype=x.dtype)
        return _convkernels.conv_forward_s1(x, np.ascontiguousarray(w), out)
    wmat = np.ascontiguousarray(w.reshape(k_out, c * kd * kh * kw))
    out = np.empty((k_out, od, oh, ow), dtype=x.dtype)
    for z0, z1 in _depth_blocks(od, oh * ow, c * kd * kh * kw):
        cols, _ = _im2col(x, (kd, kh, kw), stride, z0, z1)
        out[:, z0:z1] = (wmat @ cols).reshape(k_out, z1 - z0, oh, ow)
    return out


def _conv3d_grad_w(x: np.ndarray, g: np.ndarray, w_shape, stride) -> np.ndarray:
    k_out, c, kd, kh, kw = w_shape
    od, oh, ow = g.shape[1:]
    if _unit_stride_fast_path(x, stride):
        gw = np.zeros(w_shape, dtype=x.dtype)
        return _convkernels.conv_grad_w_s1(x, np.ascontiguousarray(g), gw)
    gw = np.zeros((k_out, c * kd * kh * kw), dtype=x.dtype)
    for z0, z1 in _depth_blocks(od, oh * ow, c * kd * kh * kw):
        cols, _ = _im2col(x, (kd, kh, kw), stride, z0, z1)
        gslab = g[:, z0:z1].reshape(k_out, -1)
        gw += gslab @ cols.T
    return gw.reshape(w_shape)


def _conv3d_grad_x(w: np.ndarray, g: np.ndarray, x_shape, stride) -> np.ndarray:
    k_out, c, kd, kh, kw = w.shape
    sd, sh, sw = stride
    od, oh, ow = g.shape[1:]
    if USE_COMPILED_KERNELS and stride == (1, 1, 1):
        gx = np.zeros(x_shape, dtype=g.dtype)
        return _convkernels.conv_grad_x_s1(
            np.ascontiguousarray(w), np.ascontiguousarray(g), gx
        )
    wmat = np.ascontiguousarray(w.reshape(k_out, c * kd * kh * kw))
    gx = np.zeros(x_shape, dtype=g.dtype)
    for z0, z1 in _depth_blocks(od, oh * ow, c * kd * kh * kw):
        gslab = g[:, z0:z1].reshape(k_out, -1)
        cols_g = (wmat.T @ gslab).reshape(c, kd, kh, kw, z1 - z0, oh, ow)
        for i in range(kd):
            dlo = z0 * sd + i
            for j in range(kh):
                for l in range(kw):
                    gx[
                        :,
                        dlo : dlo + (z1 - z0 - 1) * sd + 1 : sd,
                        j : j + (oh - 1) * sh + 1 : sh,
                        l : l + (ow - 1) * sw + 1 : sw,
                    ] += cols_g[:, i, j, l]
    return gx


@dataclass
class ConvParams:
    """Weights (and optional bias) of one valid 3D convolution.

    weights: (out_features, in_features, kd, kh, kw); bias is present only on
    layers not followed by batch normalization.
    """

    weights: Tensor
    bias: Optional[Tensor] = None
    stride: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.weights.data.ndim != 5:
            raise ShapeError(
                f"conv weights must be 5-d, got shape {self.weights.shape}"
            )
        if any(k < 1 for k in self.weights.shape[2:]):
            raise ContractViolationError("kernel extents must be >= 1")
        if any(s < 1 for s in self.stride):
            raise ContractViolationError("strides must be >= 1")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal the output feature count")


def conv3d_valid(x: Tensor, p: ConvParams) -> Tensor:
    """Strided valid 3D cross-correlation; output extent = (in - k)//s + 1."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C, D, H, W) input, got shape {x.shape}")
    w = p.weights
    kernel = w.shape[2:]
    _check_spatial(x.shape, kernel, p.stride, x.shape[0], w.shape[1])
    out_data = _conv3d_forward(x.data, w.data, p.stride)
    x_shape, stride = x.data.shape, p.stride
    pulls = [
        (x, lambda g: _conv3d_grad_x(w.data, g, x_shape, stride)),
        (w, lambda g: _conv3d_grad_w(x.data, g, w.shape, stride)),
    ]
    if p.bias is not None:
        out_data += p.bias.data[:, None, None, None]
        pulls.append((p.bias, lambda g: g.sum(axis=(1, 2, 3))))
    return trace(Tensor(out_data), pulls)


def upsample_nn(x: Tensor, factors: tuple[int, int, int]) -> Tensor:
    """Nearest-neighbor upsampling: each voxel replicated per-axis."""
    if any(f < 1 for f in factors):
        raise ContractViolationError(f"upsampling factors must be >= 1, got {factors}")
    fd, fh, fw = (int(f) for f in factors)
    data = x.data
    if (fd, fh, fw) != (1, 1, 1):
        data = data.repeat(fd, axis=1).repeat(fh, axis=2).repeat(fw, axis=3)
    c, d, h, w = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        return g.reshape(c, d, fd, h, fh, w, fw).sum(axis=(2, 4, 6))

    return trace(Tensor(data), [(x, vjp)])


@dataclass
class BNState:
    """Learnable scale/shift and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    batches_seen: int = 0

    @classmethod
    def create(cls, features: int, momentum: float = 0.1, eps: float = 1e-5,
               dtype=np.float32) -> "BNState":
        return cls(
            gamma=Tensor(np.ones(features, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(features, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(features, dtype=dtype),
            running_var=np.ones(features, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def set_running(self, mean, var) -> None:
        """Install running statistics directly (e.g. when loading a checkpoint)."""
        self.running_mean = np.asarray(mean, dtype=self.running_mean.dtype).copy()
        self.running_var = np.asarray(var, dtype=self.running_var.dtype).copy()
        if np.any(self.running_var < 0):
            raise ContractViolationError("running variance must be >= 0")
        self.batches_seen = max(self.batches_seen, 1)


def batchnorm(x: Tensor, s: BNState, mode: str) -> Tensor:
    """Per-feature normalization over the spatial extent of the single patch.

    Train mode normalizes with the current patch statistics and updates the
    running averages as a side effect; eval mode applies the stored statistics.
    """
    if mode not in ("train", "eval"):
        raise ContractViolationError(f"unknown batchnorm mode {mode!r}")
    if x.data.ndim != 4 or x.shape[0] != s.gamma.shape[0]:
        raise ShapeError(
            f"batchnorm over {s.gamma.shape[0]} features cannot apply to shape {x.shape}"
        )
    dt = x.data.dtype
    spatial = (1, 2, 3)
    gamma, beta = s.gamma, s.beta

    if mode == "train":
        mu = x.data.mean(axis=spatial)
        var = x.data.var(axis=spatial)
        inv = 1.0 / np.sqrt(var + dt.type(s.eps))
        xhat = (x.data - mu[:, None, None, None]) * inv[:, None, None, None]
        m = s.momentum
        s.running_mean = ((1.0 - m) * s.running_mean + m * mu).astype(
            s.running_mean.dtype
        )
        s.running_var = ((1.0 - m) * s.running_var + m * var).astype(
            s.running_var.dtype
        )
        s.batches_seen += 1

        def vjp_x(g: np.ndarray) -> np.ndarray:
            gxhat_mean = (g * xhat).mean(axis=spatial)
            g_mean = g.mean(axis=spatial)
            return (gamma.data * inv)[:, None, None, None] * (
                g
                - g_mean[:, None, None, None]
                - xhat * gxhat_mean[:, None, None, None]
            )

    else:
        if s.batches_seen == 0:
            raise ContractViolationError(
                "eval-mode batchnorm before any running-statistics update"
            )
        inv = 1.0 / np.sqrt(s.running_var.astype(dt) + dt.type(s.eps))
        xhat = (x.data - s.running_mean.astype(dt)[:, None, None, None]) * inv[
            :, None, None, None
        ]

        def vjp_x(g: np.ndarray) -> np.ndarray:
            return g * (gamma.data * inv)[:, None, None, None]

    out = Tensor(gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None])
    return trace(
        out,
        [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=spatial)),
            (beta, lambda g: g.sum(axis=spatial)),
        ],
    )


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        keep = x.data > 0
        out = Tensor(np.where(keep, x.data, x.data.dtype.type(0)))
        return trace(out, [(x, lambda g: g * keep)])
    if kind == "sigmoid":
        sig = _stable_sigmoid(x.data)
        out = Tensor(sig)
        return trace(out, [(x, lambda g: g * sig * (1.0 - sig))])
    raise ContractViolationError(f"unknown activation {kind!r}")


def dropout(
    x: Tensor,
    p: float,
    mode: str,
    variant: str = "element",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time.

    The drawn mask is captured by the gradient rule, so backward drops exactly
    the same coordinates. ``variant="spatial"`` zeroes whole feature maps.
    """
    if not 0.0 <= p < 1.0:
        raise ContractViolationError(f"dropout probability must be in [0, 1), got {p}")
    if variant not in ("element", "spatial"):
        raise ContractViolationError(f"unknown dropout variant {variant!r}")
    if mode not in ("train", "eval"):
        raise ContractViolationError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractViolationError("train-mode dropout needs a random generator")
    if variant == "spatial":
        draw_shape = (x.shape[0],) + (1,) * (x.data.ndim - 1)
    else:
        draw_shape = x.shape
    keep = rng.random(draw_shape) >= p
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(x.data.dtype) * factor
    out = Tensor(x.data * mask)
    return trace(out, [(x, lambda g: g * mask)])


def crop_center(x: Tensor, target_spatial: tuple[int, int, int]) -> Tensor:
    """Extract the centered spatial region; margins must be even per axis."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected (C, D, H, W) input, got shape {x.shape}")
    src = x.shape[1:]
    margins = []
    for ax, (n, t) in enumerate(zip(src, target_spatial)):
        if t > n:
            raise ShapeError(
                f"crop target {t} exceeds source extent {n} along {_AXIS_NAMES[ax]}"
            )
        if (n - t) % 2 != 0:
            raise ShapeError(
                f"asymmetric crop along {_AXIS_NAMES[ax]}: {n} -> {t} "
                "leaves an odd margin"
            )
        margins.append((n - t) // 2)
    if all(m == 0 for m in margins):
        return x
    md, mh, mw = margins
    sl = (
        slice(None),
        slice(md, md + target_spatial[0]),
        slice(mh, mh + target_spatial[1]),
        slice(mw, mw + target_spatial[2]),
    )
    out = Tensor(x.data[sl].copy())
    x_shape = x.data.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[sl] = g
        return gx

    return trace(out, [(x, vjp)])


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature axis; spatial shapes must already match."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"spatial shapes differ: {a.shape[1:]} vs {b.shape[1:]} (crop first)"
        )
    na = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return trace(
        out,
        [
            (a, lambda g: g[:na]),
            (b, lambda g: g[na:]),
        ],
    )
