"""Full quality-assessment network: normalization, spatial reduction,
anglewise attention stack, and the regression head, plus checkpoint IO.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import attention, ops, tensor
from .attention import AttentionConfig, AttentionMaps, KernelWeights, LinearWeights
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .tensor import Value

CHECKPOINT_MAGIC = b"LFAC"
CHECKPOINT_VERSION = 1

# (name, form) for the seven attention stages, in network order.
STAGES = (("awsa1", "self"), ("awsa2", "self"), ("awsa3", "self"),
          ("aga", "grid"), ("awsa4", "self"), ("awsa5", "self"),
          ("aca", "central"))


@dataclass(frozen=True)
class ModelConfig:
    """Input extents plus the width schedule of every stage."""

    extents: tuple[int, int, int, int, int]
    channels: tuple[int, int, int, int, int] = (16, 32, 48, 64, 96)
    heads: int = 8
    expansion: int = 384
    fc_hidden: int = 64
    score_range: tuple[float, float] = (0.0, 1.0)
    pre_kind: str = "pointwise-3d-conv"
    post_kind: str = "lf-dsc"
    window: int = 3
    stride: int = 2

    def __post_init__(self):
        if len(self.extents) != 5 or any(int(e) <= 0 for e in self.extents):
            raise ConfigError(f"extents must be five positive integers, got {self.extents}")
        if len(self.channels) != 5 or any(int(c) <= 0 for c in self.channels):
            raise ConfigError(f"channel schedule must be five positive widths, got {self.channels}")
        for field in ("heads", "expansion", "fc_hidden", "window", "stride"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"{field} must be positive")
        if self.window % 2 == 0:
            raise ConfigError("grid window must be odd")
        if self.pre_kind not in attention.KERNEL_KINDS:
            raise ConfigError(f"unknown pre kind {self.pre_kind!r}")
        if self.post_kind not in attention.KERNEL_KINDS:
            raise ConfigError(f"unknown post kind {self.post_kind!r}")
        lo, hi = self.score_range
        if not float(lo) < float(hi):
            raise ConfigError(f"score range must be ordered, got {self.score_range}")
        trace_shapes(self)  # validates the whole schedule

    @property
    def token_dim(self) -> int:
        _, _, x, y, _ = reduced_extents(self)
        return x * y * self.channels[4]


def reference_config() -> ModelConfig:
    return ModelConfig(extents=(7, 7, 434, 434, 3))


def desk_config() -> ModelConfig:
    """Reference schedule at a spatial extent a single core can train."""
    return ModelConfig(extents=(7, 7, 64, 64, 3))


def toy_config() -> ModelConfig:
    """Smallest config that still exercises every stage; for tests."""
    return ModelConfig(extents=(3, 3, 8, 8, 3), channels=(3, 4, 4, 4, 8),
                       heads=4, expansion=16, fc_hidden=4)


def reduced_extents(cfg: ModelConfig) -> tuple[int, int, int, int, int]:
    u, v, x, y, _ = cfg.extents
    x = ops.same_pad_amount(x, 3, 2)[0]
    y = ops.same_pad_amount(y, 3, 2)[0]
    for _ in range(3):
        x = (x + 1) // 2
        y = (y + 1) // 2
    return u, v, x, y, cfg.channels[4]


def trace_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Extent arithmetic for the whole forward pass; no arrays allocated.

    Raises ConfigError where the schedule cannot run (angular grid too
    small for the windowed stage, non-odd extents at the central stage,
    token width not divisible by the head count).
    """
    u, v, x, y, c = cfg.extents
    ch = cfg.channels
    trace = [("input", (u, v, x, y, c))]
    x1 = ops.same_pad_amount(x, 3, 2)[0]
    y1 = ops.same_pad_amount(y, 3, 2)[0]
    trace.append(("reduce.conv1", (u, v, x1, y1, ch[0])))
    trace.append(("reduce.conv2", (u, v, x1, y1, ch[1])))
    xs, ys = x1, y1
    for i in range(3):
        grown = ch[i + 2]
        trace.append((f"reduce.stage{i + 1}.dsc_a", (u, v, xs, ys, grown)))
        xs, ys = (xs + 1) // 2, (ys + 1) // 2
        trace.append((f"reduce.stage{i + 1}.pool", (u, v, xs, ys, grown)))
        trace.append((f"reduce.stage{i + 1}.dsc_b", (u, v, xs, ys, grown)))
    token_dim = xs * ys * ch[4]
    if token_dim % cfg.heads:
        raise ConfigError(f"token width {token_dim} not divisible by {cfg.heads} heads")
    ua, va = u, v
    for name, form in STAGES:
        if form == "grid":
            if cfg.window > ua or cfg.window > va:
                raise ConfigError(f"window {cfg.window} exceeds angular grid {ua}x{va}")
            ua = (ua - cfg.window) // cfg.stride + 1
            va = (va - cfg.window) // cfg.stride + 1
        elif form == "central":
            if ua % 2 == 0 or va % 2 == 0:
                raise ConfigError(f"central stage needs odd angular extents, got {ua}x{va}")
            ua, va = 1, 1
        trace.append((f"stack.{name}", (ua, va, xs, ys, ch[4])))
    trace.append(("head.expand", (1, 1, xs, ys, cfg.expansion)))
    trace.append(("head.pooled", (1, cfg.expansion)))
    trace.append(("head.fc1", (1, cfg.fc_hidden)))
    trace.append(("score", (1, 1)))
    return trace


# normalization

@dataclass
class NormalizationStats:
    """Per-coordinate mean and population standard deviation of the
    training split; the normalizer divides by sigma + 1.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, np.float32)
        self.sigma = np.asarray(self.sigma, np.float32)
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if np.any(self.sigma < 0):
            raise ContractError("negative standard deviation")


def fit_normalization(train_fields) -> NormalizationStats:
    samples = list(train_fields)
    if not samples:
        raise ContractError("cannot fit normalization on an empty split")
    total = np.zeros(np.shape(samples[0]), np.float64)
    for sample in samples:
        total += np.asarray(sample, np.float64)
    mu = total / len(samples)
    spread = np.zeros_like(mu)
    for sample in samples:
        spread += (np.asarray(sample, np.float64) - mu) ** 2
    return NormalizationStats(mu=mu.astype(np.float32),
                              sigma=np.sqrt(spread / len(samples)).astype(np.float32))


def normalize(sample: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    arr = np.asarray(sample, np.float32)
    if arr.shape != stats.mu.shape:
        raise ShapeError(f"sample {arr.shape} does not match stats {stats.mu.shape}")
    return ((arr - stats.mu) / (stats.sigma + 1.0)).astype(np.float32)


# parameter bookkeeping

@dataclass
class NormWeights:
    gain: Value
    shift: Value


def _init_norm(channels: int) -> NormWeights:
    return NormWeights(gain=tensor.leaf(np.ones(channels, np.float32), requires_grad=True),
                       shift=tensor.leaf(np.zeros(channels, np.float32), requires_grad=True))


def _weight_items(prefix: str, w):
    if isinstance(w, ops.ConvWeights):
        yield f"{prefix}.kernel", w.kernel
        yield f"{prefix}.bias", w.bias
    elif isinstance(w, ops.LfDscWeights):
        yield f"{prefix}.angular_depthwise", w.angular_depthwise
        yield f"{prefix}.spatial_depthwise", w.spatial_depthwise
        yield f"{prefix}.spatial_bias", w.spatial_bias
        yield f"{prefix}.pointwise", w.pointwise
        yield f"{prefix}.pointwise_bias", w.pointwise_bias
    elif isinstance(w, LinearWeights):
        yield f"{prefix}.matrix", w.matrix
        yield f"{prefix}.bias", w.bias
    elif isinstance(w, KernelWeights):
        yield f"{prefix}.svfm", w.svfm
        for part in ("pre_q", "pre_k", "pre_v", "post", "projection"):
            yield from _weight_items(f"{prefix}.{part}", getattr(w, part))
    elif isinstance(w, NormWeights):
        yield f"{prefix}.gain", w.gain
        yield f"{prefix}.shift", w.shift
    else:
        raise TypeError(f"unknown weight container {type(w).__name__}")


class Model:
    """The assembled network; owns every parameter Value."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        ch = cfg.channels
        in_c = cfg.extents[4]
        self.conv1 = ops.init_conv_weights(rng, ch[0], in_c, 9)
        self.conv2 = ops.init_conv_weights(rng, ch[1], ch[0], 9)
        self.stages = []
        width = ch[1]
        for i in range(3):
            grown = ch[i + 2]
            self.stages.append((
                ops.init_lf_dsc_weights(rng, width, grown), _init_norm(grown),
                ops.init_lf_dsc_weights(rng, grown, grown), _init_norm(grown),
            ))
            width = grown
        acfg = AttentionConfig(heads=cfg.heads, pre_kind=cfg.pre_kind,
                               post_kind=cfg.post_kind, window=cfg.window,
                               stride=cfg.stride)
        self.attention_config = acfg
        self.attn = [(name, form,
                      attention.init_kernel_weights(rng, acfg, ch[4], cfg.token_dim),
                      _init_norm(ch[4]))
                     for name, form in STAGES]
        self.expand = ops.init_conv_weights(rng, cfg.expansion, ch[4], 1)
        self.fc1 = LinearWeights(
            matrix=tensor.leaf(ops.glorot_uniform(rng, (cfg.fc_hidden, cfg.expansion),
                                                  cfg.expansion, cfg.fc_hidden),
                               requires_grad=True),
            bias=tensor.leaf(np.zeros(cfg.fc_hidden, np.float32), requires_grad=True))
        self.fc2 = LinearWeights(
            matrix=tensor.leaf(ops.glorot_uniform(rng, (1, cfg.fc_hidden),
                                                  cfg.fc_hidden, 1), requires_grad=True),
            bias=tensor.leaf(np.zeros(1, np.float32), requires_grad=True))
        _, _, xr, yr, _ = reduced_extents(cfg)
        self._avg = tensor.leaf(np.full((xr * yr, 1), 1.0 / (xr * yr), np.float32))

    def parameters(self) -> list[tuple[str, Value]]:
        items: list[tuple[str, Value]] = []
        items.extend(_weight_items("reduce.conv1", self.conv1))
        items.extend(_weight_items("reduce.conv2", self.conv2))
        for i, (dsc_a, norm_a, dsc_b, norm_b) in enumerate(self.stages, start=1):
            items.extend(_weight_items(f"reduce.stage{i}.dsc_a", dsc_a))
            items.extend(_weight_items(f"reduce.stage{i}.norm_a", norm_a))
            items.extend(_weight_items(f"reduce.stage{i}.dsc_b", dsc_b))
            items.extend(_weight_items(f"reduce.stage{i}.norm_b", norm_b))
        for name, _, weights, norm in self.attn:
            items.extend(_weight_items(f"stack.{name}", weights))
            items.extend(_weight_items(f"stack.{name}.norm", norm))
        items.extend(_weight_items("head.expand", self.expand))
        items.extend(_weight_items("head.fc1", self.fc1))
        items.extend(_weight_items("head.fc2", self.fc2))
        return items

    def values(self) -> list[Value]:
        return [value for _, value in self.parameters()]

    def parameter_count(self) -> int:
        return sum(value.data.size for _, value in self.parameters())

    def spatial_reduction(self, lf: Value) -> Value:
        out = ops.conv3d_spatial(lf, self.conv1, stride=2)
        out = ops.conv3d_spatial(out, self.conv2)
        for dsc_a, norm_a, dsc_b, norm_b in self.stages:
            out = ops.swish(ops.layer_norm(ops.lf_dsc(out, dsc_a), norm_a.gain, norm_a.shift))
            out = ops.max_pool_spatial(out)
            out = ops.swish(ops.layer_norm(ops.lf_dsc(out, dsc_b), norm_b.gain, norm_b.shift))
        return out

    def attention_stack(self, features: Value,
                        collect_maps: bool = False) -> tuple[Value, list[AttentionMaps]]:
        kernels = {"self": attention.anglewise_self_attention,
                   "grid": attention.anglewise_grid_attention,
                   "central": attention.anglewise_central_attention}
        maps: list[AttentionMaps] = []
        out = features
        for name, form, weights, norm in self.attn:
            out, stage_maps = kernels[form](out, self.attention_config, weights, stage=name)
            out = ops.layer_norm(out, norm.gain, norm.shift)
            if collect_maps:
                maps.append(stage_maps)
        return out, maps

    def quality_head(self, features: Value) -> Value:
        u, v, x, y, _ = features.shape
        if (u, v) != (1, 1):
            raise ShapeError(f"head expects a 1x1 angular grid, got {u}x{v}")
        out = ops.swish(ops.conv3d_pointwise(features, self.expand))
        flat = tensor.reshape(out, (x * y, self.cfg.expansion))
        pooled = tensor.transpose(tensor.matmul(tensor.transpose(flat, (1, 0)), self._avg),
                                  (1, 0))
        hidden = tensor.matmul(pooled, tensor.transpose(self.fc1.matrix, (1, 0)))
        hidden = ops.swish(tensor.add(hidden, tensor.reshape(self.fc1.bias,
                                                             (1, self.cfg.fc_hidden))))
        score = tensor.matmul(hidden, tensor.transpose(self.fc2.matrix, (1, 0)))
        return tensor.add(score, tensor.reshape(self.fc2.bias, (1, 1)))

    def forward(self, sample, stats: NormalizationStats | None = None,
                collect_maps: bool = False):
        arr = np.asarray(sample, np.float32)
        if arr.shape != tuple(self.cfg.extents):
            raise ShapeError(f"sample {arr.shape} does not match config {self.cfg.extents}")
        if stats is not None:
            arr = normalize(arr, stats)
        out = self.spatial_reduction(tensor.leaf(arr))
        out, maps = self.attention_stack(out, collect_maps)
        score = self.quality_head(out)
        return (score, maps) if collect_maps else score


def mse_loss(predictions, truths) -> Value:
    preds = list(predictions)
    target = np.asarray(truths, np.float32).reshape(-1)
    if len(preds) == 0:
        raise ContractError("loss needs at least one prediction")
    if len(preds) != target.size:
        raise ShapeError(f"{len(preds)} predictions vs {target.size} truths")
    stacked = tensor.concat([tensor.reshape(p, (1, 1)) for p in preds], 0)
    diff = tensor.sub(stacked, tensor.leaf(target.reshape(-1, 1)))
    return tensor.mean_all(tensor.mul(diff, diff))


# checkpoint IO

def _config_text(cfg: ModelConfig, history) -> str:
    lines = []
    for field in fields(ModelConfig):
        raw = getattr(cfg, field.name)
        if isinstance(raw, tuple):
            lines.append(f"{field.name}={','.join(repr(e) for e in raw)}")
        else:
            lines.append(f"{field.name}={raw}")
    for record in history:
        text = str(record)
        if "\n" in text:
            raise FormatError("history records must be single lines")
        lines.append(f"history={text}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[ModelConfig, list[str]]:
    parsed: dict[str, object] = {}
    history: list[str] = []
    int_tuples = {"extents", "channels"}
    ints = {"heads", "expansion", "fc_hidden", "window", "stride"}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r}")
        try:
            if key == "history":
                history.append(raw)
            elif key in int_tuples:
                parsed[key] = tuple(int(e) for e in raw.split(","))
            elif key in ints:
                parsed[key] = int(raw)
            elif key == "score_range":
                lo, hi = raw.split(",")
                parsed[key] = (float(lo), float(hi))
            elif key in ("pre_kind", "post_kind"):
                parsed[key] = raw
            else:
                raise FormatError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise FormatError(f"malformed config line {line!r}: {exc}") from exc
    try:
        return ModelConfig(**parsed), history
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"checkpoint config rejected: {exc}") from exc


def _write_blob(out, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<I", data.ndim))
    out.write(struct.pack(f"<{data.ndim}I", *data.shape))
    out.write(np.ascontiguousarray(data, "<f4").tobytes())


def _read_exact(stream, n: int) -> bytes:
    chunk = stream.read(n)
    if len(chunk) != n:
        raise FormatError("truncated checkpoint")
    return chunk


def _read_blob(stream) -> tuple[str, np.ndarray] | None:
    header = stream.read(4)
    if not header:
        return None
    if len(header) != 4:
        raise FormatError("truncated checkpoint")
    name_len, = struct.unpack("<I", header)
    name = _read_exact(stream, name_len).decode("utf-8")
    rank, = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(stream, 4 * count), "<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(path: str, model: Model, stats: NormalizationStats,
                    history=()) -> None:
    text = _config_text(model.cfg, history).encode("utf-8")
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        out.write(struct.pack("<I", len(text)))
        out.write(text)
        for name, value in model.parameters():
            _write_blob(out, name, value.data)
        _write_blob(out, "norm.mu", stats.mu)
        _write_blob(out, "norm.sigma", stats.sigma)


def load_checkpoint(path: str) -> tuple[Model, NormalizationStats, list[str]]:
    with open(path, "rb") as stream:
        if _read_exact(stream, 4) != CHECKPOINT_MAGIC:
            raise FormatError("not a checkpoint file")
        version, = struct.unpack("<I", _read_exact(stream, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        text_len, = struct.unpack("<I", _read_exact(stream, 4))
        cfg, history = _parse_config_text(_read_exact(stream, text_len).decode("utf-8"))
        blobs: dict[str, np.ndarray] = {}
        while True:
            blob = _read_blob(stream)
            if blob is None:
                break
            if blob[0] in blobs:
                raise FormatError(f"duplicate blob {blob[0]!r}")
            blobs[blob[0]] = blob[1]
    model = Model(cfg, np.random.default_rng(0))
    for name, value in model.parameters():
        stored = blobs.pop(name, None)
        if stored is None:
            raise FormatError(f"checkpoint is missing {name!r}")
        if stored.shape != value.data.shape:
            raise FormatError(f"{name!r} has shape {stored.shape}, "
                              f"expected {value.data.shape}")
        value.data = stored
    for required in ("norm.mu", "norm.sigma"):
        if required not in blobs:
            raise FormatError(f"checkpoint is missing {required!r}")
    stats = NormalizationStats(mu=blobs.pop("norm.mu"), sigma=blobs.pop("norm.sigma"))
    if blobs:
        raise FormatError(f"unrecognized blobs: {sorted(blobs)}")
    return model, stats, history
