"""Anglewise attention kernels.

Subviews of a light field become tokens: the spatial and channel axes of
each (u,v) subview are flattened into one feature vector, and attention runs
over the angular domain.  Three kernels share the same machinery:

* self-attention: every subview queries every subview; shape-preserving.
* grid attention: b x b angular windows with stride s; the central subview
  of each window queries its window, so the angular grid shrinks.
* central attention: one window spanning the whole (odd) angular domain,
  queried by the central subview; the angular grid collapses to 1 x 1.

Each kernel wraps its attention core with a shared subview feature map
(3 x 3 spatial depthwise), three independent pre-attention transforms for
keys/queries/values, a post-attention transform, and a final pointwise
projection.  Pre/post transforms are pluggable: token-space linear,
pointwise 3D convolution, or the depthwise separable block.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ops, tensor
from .errors import ConfigError, ShapeError
from .tensor import Value

KERNEL_KINDS = ("linear", "pointwise-3d-conv", "lf-dsc")


@dataclass
class AttentionConfig:
    heads: int = 8
    pre_kind: str = "pointwise-3d-conv"
    post_kind: str = "lf-dsc"
    window: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        for kind in (self.pre_kind, self.post_kind):
            if kind not in KERNEL_KINDS:
                raise ConfigError(f"unknown kernel kind {kind!r}; choose from {KERNEL_KINDS}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclass
class AttentionMaps:
    """Raw softmax weights of one kernel application plus their embedding
    into the source angular grid, for export and inspection."""
    stage: str
    weights: np.ndarray        # (heads, n_queries, n_keys)
    grids: np.ndarray          # (heads, n_queries, u, v), zeros outside windows
    source_extents: tuple[int, int] = (0, 0)


@dataclass
class KernelWeights:
    """Learnables of one attention kernel application."""
    svfm: Value                # (c, 9) spatial depthwise
    pre_q: object
    pre_k: object
    pre_v: object
    post: object
    projection: ops.ConvWeights

    def parameters(self) -> list[Value]:
        out = [self.svfm]
        for part in (self.pre_q, self.pre_k, self.pre_v, self.post):
            out.extend(_kind_parameters(part))
        out.extend([self.projection.kernel, self.projection.bias])
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def table_parameter_count(self) -> int:
        """Parameters of the pluggable pre/post transforms only, the part
        that varies between kernel-kind combinations."""
        return sum(p.data.size
                   for part in (self.pre_q, self.pre_k, self.pre_v, self.post)
                   for p in _kind_parameters(part))


@dataclass
class LinearWeights:
    matrix: Value   # (D, D)
    bias: Value     # (D,)


def _kind_parameters(w) -> list[Value]:
    if isinstance(w, LinearWeights):
        return [w.matrix, w.bias]
    if isinstance(w, ops.ConvWeights):
        return [w.kernel, w.bias]
    if isinstance(w, ops.LfDscWeights):
        return [w.angular_depthwise, w.spatial_depthwise, w.spatial_bias,
                w.pointwise, w.pointwise_bias]
    raise ConfigError(f"unrecognized kernel weight container {type(w).__name__}")


def _init_kind(rng: np.random.Generator, kind: str, channels: int,
               token_dim: int | None) -> object:
    if kind == "linear":
        if token_dim is None:
            raise ConfigError("linear kernel kind needs the token dimension at init")
        return LinearWeights(
            matrix=tensor.leaf(ops.glorot_uniform(rng, (token_dim, token_dim),
                                                  token_dim, token_dim), requires_grad=True),
            bias=tensor.leaf(np.zeros(token_dim, np.float32), requires_grad=True))
    if kind == "pointwise-3d-conv":
        return ops.init_conv_weights(rng, channels, channels, 1)
    if kind == "lf-dsc":
        return ops.init_lf_dsc_weights(rng, channels, channels)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def init_kernel_weights(rng: np.random.Generator, cfg: AttentionConfig, channels: int,
                        token_dim: int | None = None) -> KernelWeights:
    return KernelWeights(
        svfm=tensor.leaf(ops.glorot_uniform(rng, (channels, 9), 9, 9), requires_grad=True),
        pre_q=_init_kind(rng, cfg.pre_kind, channels, token_dim),
        pre_k=_init_kind(rng, cfg.pre_kind, channels, token_dim),
        pre_v=_init_kind(rng, cfg.pre_kind, channels, token_dim),
        post=_init_kind(rng, cfg.post_kind, channels, token_dim),
        projection=ops.init_conv_weights(rng, channels, channels, 1),
    )


def subview_feature_map(lf: Value, kernel: Value) -> Value:
    """Shared 3 x 3 spatial depthwise pass ahead of the K/Q/V transforms."""
    return ops.depthwise_spatial(lf, kernel)


def pre_attention(lf: Value, kind: str, weights) -> Value:
    """Apply one of the pluggable per-token transforms; shape-preserving."""
    if kind == "linear":
        u, v, x, y, c = lf.shape
        m = flatten_tokens(lf)
        out = tensor.matmul(m, tensor.transpose(weights.matrix, (1, 0)))
        out = tensor.add(out, tensor.reshape(weights.bias, (1, weights.bias.shape[0])))
        return unflatten_tokens(out, lf.shape)
    if kind == "pointwise-3d-conv":
        return ops.conv3d_pointwise(lf, weights)
    if kind == "lf-dsc":
        return ops.lf_dsc(lf, weights)
    raise ConfigError(f"unknown kernel kind {kind!r}")


def flatten_tokens(lf: Value) -> Value:
    """(u,v,x,y,c) -> (u*v, x*y*c); row t is subview (t div v, t mod v)."""
    u, v, x, y, c = lf.shape
    return tensor.reshape(lf, (u * v, x * y * c))


def unflatten_tokens(m: Value, shape5) -> Value:
    return tensor.reshape(m, tuple(shape5))


def split_heads(m: Value, h: int) -> list[Value]:
    """Partition the feature axis into h contiguous column slices."""
    a, d_total = m.shape
    if d_total % h != 0:
        raise ConfigError(f"head count {h} does not divide token dimension {d_total}")
    d = d_total // h
    return [tensor.cols(m, j * d, (j + 1) * d) for j in range(h)]


def scaled_dot_attention(q: Value, k: Value, v: Value) -> tuple[Value, Value]:
    """softmax(Q Kt / sqrt(d)) V; also returns the softmax weight matrix."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-d token matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} does not match key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape[0]} does not match value count {v.shape[0]}")
    d = q.shape[1]
    scores = tensor.scale(tensor.matmul(q, tensor.transpose(k, (1, 0))), 1.0 / math.sqrt(d))
    weights = tensor.softmax_rows(scores)
    return tensor.matmul(weights, v), weights


def _multihead(tq: Value, tk: Value, tv: Value, h: int) -> tuple[Value, np.ndarray]:
    """Per-head scaled dot attention over token matrices; concatenates head
    outputs in head order and stacks the weight matrices."""
    outs, maps = [], []
    for qh, kh, vh in zip(split_heads(tq, h), split_heads(tk, h), split_heads(tv, h)):
        out, w = scaled_dot_attention(qh, kh, vh)
        outs.append(out)
        maps.append(w.data.copy())
    return tensor.concat(outs, axis=1), np.stack(maps)


def _embed_grids(weights: np.ndarray, members: list[list[int]],
                 extents: tuple[int, int]) -> np.ndarray:
    """Place per-window softmax rows at their member positions in the full
    (u,v) angular grid; positions outside the window stay zero."""
    h, n_q, _ = weights.shape
    u, v = extents
    grids = np.zeros((h, n_q, u, v), dtype=np.float32)
    for qi, member_tokens in enumerate(members):
        for slot, t in enumerate(member_tokens):
            grids[:, qi, t // v, t % v] = weights[:, qi, slot]
    return grids


def _finish(core_out: Value, out_extents: tuple[int, int], lf_shape, cfg: AttentionConfig,
            w: KernelWeights) -> Value:
    ou, ov = out_extents
    _, _, x, y, c = lf_shape
    features = unflatten_tokens(core_out, (ou, ov, x, y, c))
    features = pre_attention(features, cfg.post_kind, w.post)
    return ops.conv3d_pointwise(features, w.projection)


def _transformed_tokens(lf: Value, cfg: AttentionConfig, w: KernelWeights):
    fm = subview_feature_map(lf, w.svfm)
    tq = flatten_tokens(pre_attention(fm, cfg.pre_kind, w.pre_q))
    tk = flatten_tokens(pre_attention(fm, cfg.pre_kind, w.pre_k))
    tv = flatten_tokens(pre_attention(fm, cfg.pre_kind, w.pre_v))
    return tq, tk, tv


def anglewise_self_attention(lf: Value, cfg: AttentionConfig, w: KernelWeights,
                             stage: str = "AWSA") -> tuple[Value, AttentionMaps]:
    """Every subview attends to every subview; angular extents preserved."""
    u, v = lf.shape[0], lf.shape[1]
    tq, tk, tv = _transformed_tokens(lf, cfg, w)
    core_out, weights = _multihead(tq, tk, tv, cfg.heads)
    out = _finish(core_out, (u, v), lf.shape, cfg, w)
    members = [list(range(u * v))] * (u * v)
    maps = AttentionMaps(stage=stage, weights=weights,
                         grids=_embed_grids(weights, members, (u, v)),
                         source_extents=(u, v))
    return out, maps


def _windowed_attention(lf: Value, cfg: AttentionConfig, w: KernelWeights,
                        bu: int, bv: int, stride: int, stage: str) -> tuple[Value, AttentionMaps]:
    """Shared core of grid and central attention: bu x bv angular windows
    with the given stride, each queried by its central subview."""
    u, v = lf.shape[0], lf.shape[1]
    tq, tk, tv = _transformed_tokens(lf, cfg, w)

    members, centers = [], []
    rows = range(0, u - bu + 1, stride)
    cols = range(0, v - bv + 1, stride)
    for i0 in rows:
        for j0 in cols:
            members.append([(i0 + di) * v + (j0 + dj)
                            for di in range(bu) for dj in range(bv)])
            centers.append((i0 + bu // 2) * v + (j0 + bv // 2))

    out_tokens, head_maps = [], []
    for member_tokens, center in zip(members, centers):
        q = tensor.rows(tq, [center])
        k = tensor.rows(tk, member_tokens)
        vv = tensor.rows(tv, member_tokens)
        out, wmat = _multihead(q, k, vv, cfg.heads)
        out_tokens.append(out)
        head_maps.append(wmat)  # (h, 1, b*b)

    core_out = tensor.concat(out_tokens, axis=0)
    weights = np.concatenate(head_maps, axis=1)  # (h, n_windows, b*b)
    out = _finish(core_out, (len(rows), len(cols)), lf.shape, cfg, w)
    maps = AttentionMaps(stage=stage, weights=weights,
                         grids=_embed_grids(weights, members, (u, v)),
                         source_extents=(u, v))
    return out, maps


def anglewise_grid_attention(lf: Value, cfg: AttentionConfig, w: KernelWeights,
                             stage: str = "AGA") -> tuple[Value, AttentionMaps]:
    """Windowed attention tiling the angular grid; output angular extent per
    axis is floor((extent - b) / s) + 1."""
    u, v = lf.shape[0], lf.shape[1]
    if cfg.window > u or cfg.window > v:
        raise ConfigError(f"window {cfg.window} exceeds angular extents ({u},{v})")
    return _windowed_attention(lf, cfg, w, cfg.window, cfg.window, cfg.stride, stage)


def anglewise_central_attention(lf: Value, cfg: AttentionConfig, w: KernelWeights,
                                stage: str = "ACA") -> tuple[Value, AttentionMaps]:
    """One window spanning the whole angular domain, queried by its center."""
    u, v = lf.shape[0], lf.shape[1]
    if u % 2 == 0 or v % 2 == 0:
        raise ConfigError(f"central attention needs odd angular extents, got ({u},{v})")
    return _windowed_attention(lf, cfg, w, u, v, 1, stage)


def export_attention_maps(maps: AttentionMaps, path: str) -> list[str]:
    """Write one 8-bit graymap per query per head plus per-head sidecars.

    Each graymap is the query's weight grid min-max scaled to [0,255]
    (a degenerate range maps to 0).  Sidecars carry the raw weight rows,
    tab-separated, one query per line.
    """
    stage_dir = os.path.join(path, maps.stage)
    os.makedirs(stage_dir, exist_ok=True)
    written = []
    h, n_q, u, v = maps.grids.shape
    for j in range(h):
        sidecar = os.path.join(stage_dir, f"head{j}.tsv")
        with open(sidecar, "w", encoding="utf-8") as fh:
            for qi in range(n_q):
                fh.write("\t".join(f"{x:.9g}" for x in maps.weights[j, qi]) + "\n")
        written.append(sidecar)
        for qi in range(n_q):
            grid = maps.grids[j, qi]
            lo, hi = float(grid.min()), float(grid.max())
            if hi > lo:
                img = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
            else:
                img = np.zeros_like(grid, dtype=np.uint8)
            name = os.path.join(stage_dir, f"q{qi}_h{j}.pgm")
            with open(name, "wb") as fh:
                fh.write(f"P5\n{v} {u}\n255\n".encode("ascii"))
                fh.write(img.tobytes())
            written.append(name)
    return written
