"""Dense NCHW tensors: channel manipulation, convolution, and the ``.nchw`` blob format.

Tensors are plain rank-4 ``numpy.ndarray`` objects in (batch, channels, rows,
cols) order.  Functions here never mutate their inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GroupMismatch, NonDivisibleChannels, ShapeMismatch

DTYPE = np.float32
ORACLE_DTYPE = np.float64


def check_nchw(t, name="tensor"):
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeMismatch(f"{name} must be rank-4 NCHW, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeMismatch(f"{name} has an empty dimension: {t.shape}")
    return t


def flat_index(shape, n, c, y, x):
    """Row-major offset of element (n, c, y, x) in a buffer of the given NCHW shape."""
    _, C, H, W = shape
    return ((n * C + c) * H + y) * W + x


@dataclass(frozen=True)
class ConvGeometry:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        for name in ("c_in", "c_out", "k", "stride", "groups"):
            if int(getattr(self, name)) < 1:
                raise GroupMismatch(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise GroupMismatch(f"padding must be >= 0, got {self.padding}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise GroupMismatch(
                f"c_in={self.c_in} and c_out={self.c_out} must both be divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self):
        return (self.c_out, self.c_in // self.groups, self.k, self.k)

    def out_hw(self, h, w):
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"kernel {self.k} does not fit input {h}x{w} with padding {self.padding}")
        return ho, wo

    def to_dict(self):
        return {
            "c_in": self.c_in,
            "c_out": self.c_out,
            "k": self.k,
            "stride": self.stride,
            "padding": self.padding,
            "groups": self.groups,
            "bias": self.bias,
        }


# -- channel-axis manipulation -------------------------------------------------


def channel_split(t, g):
    t = check_nchw(t)
    if g < 1 or t.shape[1] % g:
        raise NonDivisibleChannels(f"cannot split {t.shape[1]} channels into {g} groups")
    w = t.shape[1] // g
    return [t[:, i * w:(i + 1) * w] for i in range(g)]


def channel_concat(parts):
    parts = [check_nchw(p, "part") for p in parts]
    if not parts:
        raise ShapeMismatch("nothing to concatenate")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeMismatch(f"concat parts disagree on n/h/w: {parts[0].shape} vs {p.shape}")
    return np.concatenate(parts, axis=1)


def channel_repeat(t, times):
    t = check_nchw(t)
    if times < 1:
        raise ValueError(f"times must be >= 1, got {times}")
    return np.tile(t, (1, times, 1, 1))


# -- convolution ------------------------------------------------------------------


def _check_conv_args(x, w, b, geom):
    x = check_nchw(x, "input")
    if x.shape[1] != geom.c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, geometry expects {geom.c_in}")
    if tuple(w.shape) != geom.weight_shape:
        raise ShapeMismatch(f"weight shape {tuple(w.shape)} != expected {geom.weight_shape}")
    if b is not None and tuple(np.shape(b)) != (geom.c_out,):
        raise ShapeMismatch(f"bias shape {np.shape(b)} != ({geom.c_out},)")
    return x


def pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_direct(x, w, b, geom):
    """Reference grouped cross-correlation by shift-and-accumulate.

    Every kernel tap is applied as a strided window of the zero-padded input,
    accumulated in float64.  Slow, and deliberately shares no code with the
    lowered (im2col) path in :func:`conv2d`.  The result is cast back to the
    input dtype.
    """
    x = _check_conv_args(x, w, b, geom)
    n, _, h, wd = x.shape
    ho, wo = geom.out_hw(h, wd)
    k, s, G = geom.k, geom.stride, geom.groups
    cg, og = geom.c_in // G, geom.c_out // G
    xp = pad_hw(x.astype(np.float64), geom.padding)
    wt = np.asarray(w, dtype=np.float64)
    out = np.zeros((n, geom.c_out, ho, wo), dtype=np.float64)
    for g in range(G):
        xin = xp[:, g * cg:(g + 1) * cg]
        for o in range(og):
            oc = g * og + o
            for ky in range(k):
                for kx in range(k):
                    window = xin[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
                    out[:, oc] += np.tensordot(wt[oc, :, ky, kx], window, axes=([0], [1]))
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out.astype(np.result_type(x.dtype, np.float32), copy=False)


def patches(xp, k, stride, ho, wo):
    """Read-only strided view (n, c, k, k, ho, wo) of a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp, (n, c, k, k, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False
    )


def im2col(x, geom):
    """Lower x to columns of shape (n, groups, c_in/groups*k*k, ho*wo)."""
    n, _, h, wd = x.shape
    ho, wo = geom.out_hw(h, wd)
    G = geom.groups
    cg = geom.c_in // G
    if geom.k == 1 and geom.stride == 1 and geom.padding == 0:
        return x.reshape(n, G, cg, h * wd), (ho, wo)
    view = patches(pad_hw(x, geom.padding), geom.k, geom.stride, ho, wo)
    return view.reshape(n, G, cg * geom.k * geom.k, ho * wo), (ho, wo)


def col2im(cols, geom, in_hw):
    """Adjoint of :func:`im2col`: scatter-add columns back to an (n, c_in, h, w) array."""
    h, wd = in_hw
    ho, wo = geom.out_hw(h, wd)
    n = cols.shape[0]
    k, s, p = geom.k, geom.stride, geom.padding
    cols = cols.reshape(n, geom.c_in, k, k, ho, wo)
    xp = np.zeros((n, geom.c_in, h + 2 * p, wd + 2 * p), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            xp[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += cols[:, :, ky, kx]
    if p:
        xp = xp[:, :, p:p + h, p:p + wd]
    return xp


def conv2d(x, w, b, geom):
    """Grouped cross-correlation via im2col and batched GEMM (the fast path)."""
    x = _check_conv_args(x, w, b, geom)
    n = x.shape[0]
    G = geom.groups
    og = geom.c_out // G
    cols, (ho, wo) = im2col(x, geom)
    wm = np.asarray(w, dtype=x.dtype).reshape(G, og, -1)
    y = np.matmul(wm[0], cols[:, 0]) if G == 1 else np.matmul(wm, cols)
    y = y.reshape(n, geom.c_out, ho, wo)
    if b is not None:
        y += np.asarray(b, dtype=y.dtype)[None, :, None, None]
    return y


# -- .nchw blobs ------------------------------------------------------------------

_HEADER = struct.Struct("<4I")


def save_nchw(path, t):
    t = check_nchw(t)
    data = np.ascontiguousarray(t, dtype="<f4")
    Path(path).write_bytes(_HEADER.pack(*t.shape) + data.tobytes())


def load_nchw(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeMismatch(f"{path}: truncated header")
    shape = _HEADER.unpack_from(raw)
    count = int(np.prod(shape))
    if len(raw) != _HEADER.size + 4 * count:
        raise ShapeMismatch(f"{path}: payload size does not match header dims {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(shape).astype(DTYPE)
