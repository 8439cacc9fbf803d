"""Light-field neural building blocks.

A light field is a rank-5 value (u, v, x, y, c): two angular axes, two
spatial axes, channels last.  Spatial convolutions share weights across all
subviews; the depthwise separable block factors a dense 3D convolution into
an angular depthwise pass, a spatial depthwise pass, and a pointwise channel
mix.  All reductions accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ContractError, ShapeError
from .tensor import Value


@dataclass
class ConvWeights:
    """Kernel (out_c, in_c, k*k) plus bias (out_c,); k*k is 1 for pointwise."""
    kernel: Value
    bias: Value

    def __post_init__(self):
        if self.kernel.data.ndim != 3:
            raise ShapeError(f"kernel must be rank 3, got {self.kernel.shape}")
        out_c = self.kernel.shape[0]
        if out_c < 1:
            raise ShapeError("out_c must be >= 1")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_c {out_c}")


@dataclass
class LfDscWeights:
    """Depthwise separable light-field convolution parameters.

    angular_depthwise and spatial_depthwise hold one k*k filter per input
    channel; the single bias of the depthwise pair sits after the spatial
    pass.  pointwise mixes channels densely.
    """
    angular_depthwise: Value   # (in_c, k*k)
    spatial_depthwise: Value   # (in_c, k*k)
    spatial_bias: Value        # (in_c,)
    pointwise: Value           # (out_c, in_c)
    pointwise_bias: Value      # (out_c,)

    def __post_init__(self):
        in_c = self.angular_depthwise.shape[0]
        if self.spatial_depthwise.shape != self.angular_depthwise.shape:
            raise ShapeError("depthwise kernels disagree on shape")
        if self.spatial_bias.shape != (in_c,):
            raise ShapeError("spatial bias does not match input channels")
        if self.pointwise.shape[1] != in_c:
            raise ShapeError("pointwise input channels do not match depthwise")
        if self.pointwise_bias.shape != (self.pointwise.shape[0],):
            raise ShapeError("pointwise bias does not match output channels")

    @property
    def in_channels(self) -> int:
        return self.angular_depthwise.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pointwise.shape[0]

    def parameter_count(self) -> int:
        return (self.angular_depthwise.data.size + self.spatial_depthwise.data.size
                + self.spatial_bias.data.size + self.pointwise.data.size
                + self.pointwise_bias.data.size)


def _check_field(lf: Value) -> None:
    if lf.data.ndim != 5:
        raise ShapeError(f"expected a rank-5 light field (u,v,x,y,c), got {lf.shape}")


def same_pad_amount(extent: int, k: int, stride: int) -> tuple[int, int, int]:
    """Same-padding split for one axis: (out_extent, pad_before, pad_after)."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    before = total // 2
    return out, before, total - before


def conv3d_pointwise(lf: Value, w: ConvWeights) -> Value:
    """1x1x1 convolution: dense channel mix at every (u,v,x,y) site."""
    _check_field(lf)
    out_c, in_c, kk = w.kernel.shape
    if kk != 1:
        raise ShapeError(f"pointwise kernel must have k*k = 1, got {kk}")
    if in_c != lf.shape[4]:
        raise ShapeError(f"kernel expects {in_c} channels, field has {lf.shape[4]}")
    u, v, x, y, _ = lf.shape
    flat = tensor.reshape(lf, (u * v * x * y, in_c))
    km = tensor.reshape(w.kernel, (out_c, in_c))
    mixed = tensor.matmul(flat, tensor.transpose(km, (1, 0)))
    mixed = tensor.add(mixed, tensor.reshape(w.bias, (1, out_c)))
    return tensor.reshape(mixed, (u, v, x, y, out_c))


def _pad_spatial(a: np.ndarray, pb_x: int, pa_x: int, pb_y: int, pa_y: int,
                 fill: float = 0.0) -> np.ndarray:
    if pb_x == pa_x == pb_y == pa_y == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pb_x, pa_x), (pb_y, pa_y), (0, 0)),
                  constant_values=fill)


def conv3d_spatial(lf: Value, w: ConvWeights, stride: int = 1, pad: bool = True) -> Value:
    """k x k convolution over (x,y) per subview, weights shared across (u,v).

    Runs as nine pointwise GEMMs (one per kernel offset) on strided slices of
    the padded field, so no patch matrix is ever materialized.
    """
    _check_field(lf)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    out_c, in_c, kk = w.kernel.shape
    k = int(round(kk ** 0.5))
    if k * k != kk:
        raise ShapeError(f"kernel tap count {kk} is not a square")
    if k % 2 != 1:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if in_c != lf.shape[4]:
        raise ShapeError(f"kernel expects {in_c} channels, field has {lf.shape[4]}")

    u, v, x, y, _ = lf.shape
    if pad:
        ox, pbx, pax = same_pad_amount(x, k, stride)
        oy, pby, pay = same_pad_amount(y, k, stride)
    else:
        ox, pbx, pax = (x - k) // stride + 1, 0, 0
        oy, pby, pay = (y - k) // stride + 1, 0, 0
        if ox < 1 or oy < 1:
            raise ShapeError(f"kernel {k} does not fit extents ({x},{y}) unpadded")

    padded = _pad_spatial(lf.data, pbx, pax, pby, pay)
    n = u * v * ox * oy
    km = w.kernel.data.astype(np.float64)  # (out_c, in_c, k*k)
    acc = np.zeros((n, out_c), dtype=np.float64)
    slices = []
    for t in range(kk):
        di, dj = divmod(t, k)
        sl = padded[:, :, di:di + (ox - 1) * stride + 1:stride,
                    dj:dj + (oy - 1) * stride + 1:stride, :]
        flat = np.ascontiguousarray(sl, dtype=np.float64).reshape(n, in_c)
        slices.append(flat)
        acc += flat @ km[:, :, t].T
    acc += w.bias.data.astype(np.float64)[None, :]
    out_data = acc.reshape(u, v, ox, oy, out_c).astype(np.float32)

    def backward(g):
        gf = g.reshape(n, out_c).astype(np.float64)
        if w.bias.requires_grad:
            w.bias.accumulate_grad(gf.sum(axis=0).astype(np.float32))
        if w.kernel.requires_grad:
            dk = np.empty_like(km)
            for t in range(kk):
                dk[:, :, t] = gf.T @ slices[t]
            w.kernel.accumulate_grad(dk.astype(np.float32))
        if lf.requires_grad:
            dpad = np.zeros((u, v, x + pbx + pax, y + pby + pay, in_c), dtype=np.float64)
            for t in range(kk):
                di, dj = divmod(t, k)
                dpad[:, :, di:di + (ox - 1) * stride + 1:stride,
                     dj:dj + (oy - 1) * stride + 1:stride, :] += \
                    (gf @ km[:, :, t]).reshape(u, v, ox, oy, in_c)
            core = dpad[:, :, pbx:pbx + x, pby:pby + y, :]
            lf.accumulate_grad(core.astype(np.float32))

    return tensor.node(out_data, (lf, w.kernel, w.bias), backward)


def _depthwise(lf: Value, kernel: Value, bias: Value | None, axes: tuple[int, int]) -> Value:
    """Shared core of the depthwise passes: k x k per-channel filter over
    the two given axes, stride 1, same-padding."""
    _check_field(lf)
    c = lf.shape[4]
    if kernel.shape[0] != c:
        raise ShapeError(f"depthwise kernel has {kernel.shape[0]} filters, field has {c} channels")
    kk = kernel.shape[1]
    k = int(round(kk ** 0.5))
    if k * k != kk:
        raise ShapeError(f"kernel tap count {kk} is not a square")
    a0, a1 = axes
    e0, e1 = lf.shape[a0], lf.shape[a1]
    _, pb0, pa0 = same_pad_amount(e0, k, 1)
    _, pb1, pa1 = same_pad_amount(e1, k, 1)

    pad_spec = [(0, 0)] * 5
    pad_spec[a0] = (pb0, pa0)
    pad_spec[a1] = (pb1, pa1)
    padded = np.pad(lf.data, pad_spec)
    kf = kernel.data.astype(np.float64)  # (c, k*k)
    acc = np.zeros(lf.shape, dtype=np.float64)
    idx_base = [slice(None)] * 5

    def tap_slice(di, dj):
        idx = list(idx_base)
        idx[a0] = slice(di, di + e0)
        idx[a1] = slice(dj, dj + e1)
        return tuple(idx)

    for t in range(kk):
        di, dj = divmod(t, k)
        acc += padded[tap_slice(di, dj)].astype(np.float64) * kf[:, t]
    if bias is not None:
        acc += bias.data.astype(np.float64)
    out_data = acc.astype(np.float32)

    def backward(g):
        g64 = g.astype(np.float64)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g64.sum(axis=(0, 1, 2, 3)).astype(np.float32))
        if kernel.requires_grad:
            dk = np.empty_like(kf)
            for t in range(kk):
                di, dj = divmod(t, k)
                dk[:, t] = (padded[tap_slice(di, dj)].astype(np.float64) * g64).sum(axis=(0, 1, 2, 3))
            kernel.accumulate_grad(dk.astype(np.float32))
        if lf.requires_grad:
            dpad = np.zeros(padded.shape, dtype=np.float64)
            for t in range(kk):
                di, dj = divmod(t, k)
                dpad[tap_slice(di, dj)] += g64 * kf[:, t]
            idx = list(idx_base)
            idx[a0] = slice(pb0, pb0 + e0)
            idx[a1] = slice(pb1, pb1 + e1)
            lf.accumulate_grad(dpad[tuple(idx)].astype(np.float32))

    parents = (lf, kernel) if bias is None else (lf, kernel, bias)
    return tensor.node(out_data, parents, backward)


def depthwise_angular(lf: Value, kernel: Value) -> Value:
    """Per-channel k x k filter over the angular axes (u,v)."""
    return _depthwise(lf, kernel, None, (0, 1))


def depthwise_spatial(lf: Value, kernel: Value, bias: Value | None = None) -> Value:
    """Per-channel k x k filter over the spatial axes (x,y)."""
    return _depthwise(lf, kernel, bias, (2, 3))


def lf_dsc(lf: Value, w: LfDscWeights) -> Value:
    """Depthwise separable light-field convolution.

    Angular depthwise, then spatial depthwise (bias after the pair), then a
    dense pointwise channel mix.  Parameter count for in_c=out_c=C at k=3 is
    9C + 9C + C^2 + 2C, well below a dense 3D convolution's 27C^2 + C.
    """
    if lf.shape[4] != w.in_channels:
        raise ShapeError(f"block expects {w.in_channels} channels, field has {lf.shape[4]}")
    h = depthwise_angular(lf, w.angular_depthwise)
    h = depthwise_spatial(h, w.spatial_depthwise, w.spatial_bias)
    pw = ConvWeights(kernel=tensor.reshape(w.pointwise, (w.out_channels, w.in_channels, 1)),
                     bias=w.pointwise_bias)
    return conv3d_pointwise(h, pw)


def max_pool_spatial(lf: Value, window: int = 2, stride: int = 2) -> Value:
    """Per-subview 2x2/stride-2 max over (x,y), ceil-mode.

    Trailing partial windows are kept (input is padded with -inf to even
    extents), so the output extent is ceil(in/2).  Gradient goes to the
    argmax; ties break to the first tap in row-major window order.
    """
    _check_field(lf)
    if (window, stride) != (2, 2):
        raise ContractError("only window 2 / stride 2 pooling is supported")
    u, v, x, y, c = lf.shape
    ox, oy = -(-x // 2), -(-y // 2)
    px, py = 2 * ox - x, 2 * oy - y
    padded = _pad_spatial(lf.data, 0, px, 0, py, fill=-np.inf)
    taps = np.stack([padded[:, :, 0::2, 0::2, :], padded[:, :, 0::2, 1::2, :],
                     padded[:, :, 1::2, 0::2, :], padded[:, :, 1::2, 1::2, :]])
    winner = taps.argmax(axis=0).astype(np.uint8)  # first max wins
    out_data = np.take_along_axis(taps, winner[None].astype(np.intp), axis=0)[0]

    def backward(g):
        dpad = np.zeros((u, v, 2 * ox, 2 * oy, c), dtype=np.float32)
        for t, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dpad[:, :, di::2, dj::2, :] = np.where(winner == t, g, 0.0)
        lf.accumulate_grad(dpad[:, :, :x, :y, :])

    return tensor.node(out_data, (lf,), backward)


def layer_norm(v: Value, gain: Value, shift: Value, normalized_axes: tuple[int, ...] = (-1,),
               eps: float = 1e-5) -> Value:
    """Normalize over the trailing feature axes, then apply gain and shift."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    ndim = v.data.ndim
    axes = tuple(sorted(a % ndim for a in normalized_axes))
    if axes != tuple(range(ndim - len(axes), ndim)):
        raise ContractError(f"normalized axes {normalized_axes} must be trailing for rank {ndim}")
    x = v.data.astype(np.float64)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mu) * inv_std).astype(np.float32)
    out_data = (xhat * gain.data + shift.data).astype(np.float32)

    def backward(g):
        g64 = g.astype(np.float64)
        if gain.requires_grad:
            gain.accumulate_grad(tensor._unbroadcast(g64 * xhat, gain.shape).astype(np.float32))
        if shift.requires_grad:
            shift.accumulate_grad(tensor._unbroadcast(g64, shift.shape).astype(np.float32))
        if v.requires_grad:
            gx = g64 * gain.data.astype(np.float64)
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            dv = inv_std * (gx - m1 - xhat * m2)
            v.accumulate_grad(dv.astype(np.float32))

    return tensor.node(out_data, (v, gain, shift), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos], dtype=np.float64))
    ex = np.exp(x[~pos], dtype=np.float64)
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(v: Value) -> Value:
    """x * sigmoid(x), with the analytic derivative sig(x)(1 + x(1 - sig(x)))."""
    sig = _sigmoid(v.data)
    out_data = (v.data * sig).astype(np.float32)

    def backward(g):
        if v.requires_grad:
            dv = g.astype(np.float64) * sig * (1.0 + v.data * (1.0 - sig))
            v.accumulate_grad(dv.astype(np.float32))

    return tensor.node(out_data, (v,), backward)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, shape).astype(np.float32)


def init_conv_weights(rng: np.random.Generator, out_c: int, in_c: int, kk: int) -> ConvWeights:
    kernel = glorot_uniform(rng, (out_c, in_c, kk), in_c * kk, out_c * kk)
    return ConvWeights(kernel=tensor.leaf(kernel, requires_grad=True),
                       bias=tensor.leaf(np.zeros(out_c, np.float32), requires_grad=True))


def init_lf_dsc_weights(rng: np.random.Generator, in_c: int, out_c: int, kk: int = 9) -> LfDscWeights:
    return LfDscWeights(
        angular_depthwise=tensor.leaf(glorot_uniform(rng, (in_c, kk), kk, kk), requires_grad=True),
        spatial_depthwise=tensor.leaf(glorot_uniform(rng, (in_c, kk), kk, kk), requires_grad=True),
        spatial_bias=tensor.leaf(np.zeros(in_c, np.float32), requires_grad=True),
        pointwise=tensor.leaf(glorot_uniform(rng, (out_c, in_c), in_c, out_c), requires_grad=True),
        pointwise_bias=tensor.leaf(np.zeros(out_c, np.float32), requires_grad=True),
    )
