"""Neural layers on NHWC tensors: convolutions, pixel shuffle, resamplers, pools."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ACC, ShapeError, Tensor, concat, matmul, reduce, record, add

UPSCALE_METHODS = ("bilinear", "bicubic", "deconv", "pixel_shuffle")
BICUBIC_A = -0.5


@dataclass
class Conv2DParams:
    kernel: Tensor  # [kh, kw, c_in, c_out]
    bias: Tensor  # [c_out]
    stride: int = 1
    padding_mode: str = "zero_same"

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.kernel.shape[3]},)")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding_mode != "zero_same":
            raise ValueError(f"unsupported padding mode {self.padding_mode!r}")


@dataclass(frozen=True)
class ResampleSpec:
    method: str
    factor: int

    def __post_init__(self):
        if self.method not in UPSCALE_METHODS:
            raise ValueError(f"unknown upscaling method {self.method!r}")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def _check_nhwc(x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC rank-4 tensor, got shape {x.shape}")


def _out_extent(size: int, stride: int) -> int:
    return -(-size // stride)


def conv2d(x: Tensor, p: Conv2DParams) -> Tensor:
    """Zero-padded SAME convolution (cross-correlation) with optional stride."""
    _check_nhwc(x)
    kh, kw, ci, co = p.kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d needs odd kernel extents, got {kh}x{kw}")
    n, h, w, c = x.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    s = p.stride
    oh, ow = _out_extent(h, s), _out_extent(w, s)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    hp = max((oh - 1) * s + kh, ph + h)
    wp = max((ow - 1) * s + kw, pw + w)
    xp = np.zeros((n, hp, wp, ci), dtype=ACC)
    xp[:, ph:ph + h, pw:pw + w] = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    # win: [n, oh, ow, ci, kh, kw] -> cols ordered like the kernel (kh, kw, ci)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, kh * kw * ci)
    wmat = p.kernel.data.astype(ACC).reshape(kh * kw * ci, co)
    out = (cols @ wmat).reshape(n, oh, ow, co) + p.bias.data.astype(ACC)

    def bw(g):
        g2 = g.reshape(n * oh * ow, co)
        gx = gk = gb = None
        if x.requires_grad and s == 1:
            # stride-1 input gradient is a SAME correlation of g with the flipped kernel
            gp = np.zeros((n, oh + kh - 1, ow + kw - 1, co), dtype=ACC)
            gp[:, kh - 1 - ph : kh - 1 - ph + oh, kw - 1 - pw : kw - 1 - pw + ow] = g
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * co)
            wflip = p.kernel.data.astype(ACC)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * co, ci)
            gx = (gcols @ wflip).reshape(n, h, w, ci)
        elif x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, ci)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a : a + (oh - 1) * s + 1 : s, b : b + (ow - 1) * s + 1 : s] += dcols[:, :, :, a, b]
            gx = gxp[:, ph:ph + h, pw:pw + w]
        if p.kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, ci, co)
        if p.bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return record("conv2d", (x, p.kernel, p.bias), out, bw)


def transposed_conv2d(x: Tensor, p: Conv2DParams, factor: int) -> Tensor:
    """Strided transposed convolution; spatial extents grow by ``factor``.

    Without bias this is the adjoint of ``conv2d`` with stride ``factor`` and
    the kernel's channel axes swapped.
    """
    _check_nhwc(x)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    kh, kw, ci, co = p.kernel.shape
    n, h, w, c = x.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    s = factor
    H, W = h * s, w * s
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    hp = max((h - 1) * s + kh, ph + H)
    wp = max((w - 1) * s + kw, pw + W)
    X = x.data.astype(ACC)
    K = p.kernel.data.astype(ACC)
    yp = np.zeros((n, hp, wp, co), dtype=ACC)
    for a in range(kh):
        for b in range(kw):
            yp[:, a : a + (h - 1) * s + 1 : s, b : b + (w - 1) * s + 1 : s] += X @ K[a, b]
    out = yp[:, ph:ph + H, pw:pw + W] + p.bias.data.astype(ACC)

    def bw(g):
        gp = np.zeros((n, hp, wp, co), dtype=ACC)
        gp[:, ph:ph + H, pw:pw + W] = g
        gx = np.zeros((n, h, w, ci), dtype=ACC) if x.requires_grad else None
        gk = np.zeros(K.shape, dtype=ACC) if p.kernel.requires_grad else None
        X2 = X.reshape(-1, ci)
        for a in range(kh):
            for b in range(kw):
                ga = gp[:, a : a + (h - 1) * s + 1 : s, b : b + (w - 1) * s + 1 : s]
                if gx is not None:
                    gx += ga @ K[a, b].T
                if gk is not None:
                    gk[a, b] = X2.T @ ga.reshape(-1, co)
        gb = g.reshape(-1, co).sum(axis=0) if p.bias.requires_grad else None
        return gx, gk, gb

    return record("transposed_conv2d", (x, p.kernel, p.bias), out, bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[n, h, w, r*r*c] -> [n, r*h, r*w, c] with out[n, r*i+di, r*j+dj, k] = x[n, i, j, (di*r+dj)*c+k]."""
    _check_nhwc(x)
    n, h, w, cc = x.shape
    if r < 1 or cc % (r * r):
        raise ShapeError(f"channel extent {cc} not divisible by r^2={r * r}")
    c = cc // (r * r)
    out = x.data.reshape(n, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * r, w * r, c)

    def bw(g):
        return (g.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, cc),)

    return record("pixel_shuffle", (x,), out, bw)


def inverse_pixel_shuffle(x: Tensor, r: int) -> Tensor:
    _check_nhwc(x)
    n, H, W, c = x.shape
    if r < 1 or H % r or W % r:
        raise ShapeError(f"spatial extents {H}x{W} not divisible by r={r}")
    h, w = H // r, W // r
    out = x.data.reshape(n, h, r, w, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, r * r * c)

    def bw(g):
        return (g.reshape(n, h, w, r, r, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, H, W, c),)

    return record("inverse_pixel_shuffle", (x,), out, bw)


def _cubic(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def interpolation_matrix(n_in: int, factor: int, method: str) -> np.ndarray:
    """Dense [n_in*factor, n_in] weight matrix; half-pixel centres, edge clamp."""
    n_out = n_in * factor
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(u).astype(int)
    frac = u - base
    m = np.zeros((n_out, n_in), dtype=ACC)
    rows = np.arange(n_out)
    if method == "bilinear":
        taps = [(0, 1 - frac), (1, frac)]
    elif method == "bicubic":
        taps = [(k, _cubic(frac - k)) for k in (-1, 0, 1, 2)]
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    for off, wt in taps:
        np.add.at(m, (rows, np.clip(base + off, 0, n_in - 1)), wt)
    return m


def resample(x: Tensor, spec: ResampleSpec) -> Tensor:
    """Fixed separable bilinear/bicubic upsampling by an integer factor."""
    _check_nhwc(x)
    if spec.method not in ("bilinear", "bicubic"):
        raise ValueError(f"resample handles bilinear/bicubic, not {spec.method!r}")
    n, h, w, c = x.shape
    mh = interpolation_matrix(h, spec.factor, spec.method)
    mw = interpolation_matrix(w, spec.factor, spec.method)
    out = np.einsum("Hh,nhwc,Ww->nHWc", mh, x.data.astype(ACC), mw, optimize=True)
    return record("resample", (x,), out,
                  lambda g: (np.einsum("Hh,nHWc,Ww->nhwc", mh, g, mw, optimize=True),))


def pool(op_kind: str, x: Tensor) -> Tensor:
    _check_nhwc(x)
    kinds = {
        "global_max": ("max", (1, 2)),
        "global_avg": ("mean", (1, 2)),
        "channel_max": ("max", (3,)),
        "channel_avg": ("mean", (3,)),
    }
    if op_kind not in kinds:
        raise ValueError(f"unknown pool {op_kind!r}")
    red, axes = kinds[op_kind]
    return reduce(red, x, axes)


def upscale(x: Tensor, spec: ResampleSpec, deconv: Conv2DParams | None = None) -> Tensor:
    """Dispatch for the fixed or learned upscalers other than pixel shuffle."""
    if spec.method in ("bilinear", "bicubic"):
        return resample(x, spec)
    if spec.method == "deconv":
        if deconv is None:
            raise ValueError("deconv upscaling needs kernel parameters")
        return transposed_conv2d(x, deconv, spec.factor)
    raise ValueError("pixel_shuffle needs an r^2-channel conv in front; use pixel_shuffle()")


__all__ = [
    "Conv2DParams", "ResampleSpec", "conv2d", "transposed_conv2d", "dense", "pixel_shuffle",
    "inverse_pixel_shuffle", "interpolation_matrix", "resample", "pool", "upscale", "concat",
]
