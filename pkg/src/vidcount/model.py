"""Video counting network: shared CNN backbone, density branch, temporal
attention, density-enhanced encoder, density-guided query decoder and point
heads.

Feature maps are kept channels-first, ``(T, C, h, w)``; token sequences are
``(n_tokens, dim)`` with tokens in row-major spatial order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    crop_size: int = 64
    downsample_factor: int = 8
    backbone_channels: tuple[int, ...] = (32, 64, 128)
    token_dim: int = 64
    density_feature_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    num_queries: int = 16
    frames: int = 5
    reference_frame: int | None = None
    query_mode: str = "concat"
    sigma: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        if self.reference_frame is None:
            object.__setattr__(self, "reference_frame", self.frames // 2)
        self.validate()

    def validate(self) -> None:
        if self.crop_size <= 0 or self.crop_size % self.downsample_factor:
            raise ModelConfigError(
                f"crop_size {self.crop_size} not divisible by downsample_factor {self.downsample_factor}")
        stages = int(round(math.log2(self.downsample_factor)))
        if 2 ** stages != self.downsample_factor:
            raise ModelConfigError("downsample_factor must be a power of two")
        if len(self.backbone_channels) != stages:
            raise ModelConfigError(
                f"{stages} stride-2 stages needed for factor {self.downsample_factor}, "
                f"got {len(self.backbone_channels)} backbone channels")
        g = math.isqrt(self.num_queries)
        if g * g != self.num_queries or g == 0:
            raise ModelConfigError(f"num_queries {self.num_queries} is not a perfect square")
        if self.feature_size % g:
            raise ModelConfigError(
                f"feature grid {self.feature_size} not divisible by query grid {g}")
        if self.token_dim % self.attention_heads:
            raise ModelConfigError("token_dim must be divisible by attention_heads")
        if self.token_dim % 4:
            raise ModelConfigError("token_dim must be divisible by 4 for 2-D sine positions")
        if self.frames < 1 or not 0 <= self.reference_frame < self.frames:
            raise ModelConfigError(
                f"reference_frame {self.reference_frame} outside [0, {self.frames})")
        if self.query_mode not in ("add", "concat"):
            raise ModelConfigError(f"unknown query_mode {self.query_mode!r}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ModelConfigError("need at least one encoder and one decoder layer")
        if self.sigma <= 0:
            raise ModelConfigError("sigma must be positive")

    @property
    def feature_size(self) -> int:
        return self.crop_size // self.downsample_factor

    @property
    def query_grid(self) -> int:
        return math.isqrt(self.num_queries)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Learned arrays keyed by stable dotted names."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in self.names()}

    def group(self, prefix: str) -> list[Tensor]:
        return [self.tensors[k] for k in self.names() if k.startswith(prefix)]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})


@dataclass
class PointPredictionSet:
    """Per-query normalized (x, y) points and confidences, both in (0, 1)."""

    points: Tensor       # (Q, 2)
    confidence: Tensor   # (Q,)

    @property
    def xy(self) -> np.ndarray:
        return self.points.data

    @property
    def conf(self) -> np.ndarray:
        return self.confidence.data

    def __len__(self) -> int:
        return self.confidence.shape[0]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.out: dict[str, Tensor] = {}

    def _put(self, name, arr):
        self.out[name] = Tensor(arr, requires_grad=True, name=name)

    def weight(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        self._put(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        self._put(name, np.zeros(shape))

    def ones(self, name, shape):
        self._put(name, np.ones(shape))

    def normal(self, name, shape, std=0.02):
        self._put(name, self.rng.normal(0.0, std, size=shape))

    def conv(self, prefix, c_out, c_in, k):
        self.weight(f"{prefix}.w", (c_out, c_in, k, k), c_in * k * k)
        self.zeros(f"{prefix}.b", (c_out,))

    def linear(self, prefix, d_in, d_out, suffix="", bias=True):
        self.weight(f"{prefix}.w{suffix}", (d_in, d_out), d_in)
        if bias:
            self.zeros(f"{prefix}.b{suffix}", (d_out,))

    def layer_norm(self, prefix, d):
        self.ones(f"{prefix}.g", (d,))
        self.zeros(f"{prefix}.b", (d,))

    def attention(self, prefix, d):
        # a key bias shifts every logit of a query equally, so softmax ignores it
        for p in ("q", "k", "v", "o"):
            self.linear(prefix, d, d, suffix=p, bias=p != "k")

    def ffn(self, prefix, d, hidden):
        self.linear(prefix, d, hidden, suffix="1")
        self.linear(prefix, hidden, d, suffix="2")


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded init: uniform(+-1/sqrt(fan_in)) weights, zero biases, N(0, 0.02) embeddings."""
    rng = np.random.default_rng(seed)
    it = _Init(rng)
    d, dd = config.token_dim, config.density_feature_dim
    c_in = 3
    for i, c in enumerate(config.backbone_channels):
        it.conv(f"backbone.{i}", c, c_in, 3)
        c_in = c
    it.conv("backbone.proj", d, c_in, 1)

    it.conv("density.conv1", dd, d, 3)
    it.conv("density.conv2", dd, dd, 3)
    it.conv("density.head", 1, dd, 1)

    it.normal("temporal.pos", (config.frames, dd))
    it.linear("temporal", dd, dd, suffix="q")
    it.linear("temporal", dd, dd, suffix="k", bias=False)
    it.linear("temporal", dd, dd, suffix="v")

    it.linear("encoder.inject", dd, d)
    for layer in range(config.encoder_layers):
        p = f"encoder.{layer}"
        it.layer_norm(f"{p}.ln1", d)
        it.attention(f"{p}.attn", d)
        it.layer_norm(f"{p}.ln2", d)
        it.ffn(f"{p}.ffn", d, 2 * d)

    stride = config.feature_size // config.query_grid
    it.normal("queries.embed", (config.num_queries, d))
    it.conv("queries.conv", d, dd, stride)
    if config.query_mode == "concat":
        it.linear("queries.fuse", 2 * d, d)

    for layer in range(config.decoder_layers):
        p = f"decoder.{layer}"
        it.attention(f"{p}.self_attn", d)
        it.layer_norm(f"{p}.ln1", d)
        it.attention(f"{p}.cross_attn", d)
        it.layer_norm(f"{p}.ln2", d)
        it.ffn(f"{p}.ffn", d, 2 * d)
        it.layer_norm(f"{p}.ln3", d)

    it.linear("head.reg", d, d, suffix="1")
    it.linear("head.reg", d, 2, suffix="2")
    it.linear("head.cls", d, 1)
    return ModelParams(config, it.out)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def sine_positions(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sine/cosine table, shape (h*w, dim): first half encodes y, second x."""
    half = dim // 2
    freqs = temperature ** (2 * (np.arange(half) // 2) / half)
    ys, xs = np.mgrid[0:h, 0:w]
    ys = (ys.reshape(-1, 1) + 0.5) / h * 2 * np.pi
    xs = (xs.reshape(-1, 1) + 0.5) / w * 2 * np.pi
    out = []
    for coord in (ys, xs):
        ang = coord / freqs
        enc = np.where(np.arange(half) % 2 == 0, np.sin(ang), np.cos(ang))
        out.append(enc)
    return np.concatenate(out, axis=1)


def conv_layer(x: Tensor, params: ModelParams, prefix: str, stride=1, padding=0) -> Tensor:
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    y = ad.conv2d(x, w, stride=stride, padding=padding)
    return y + b.reshape(1, -1, 1, 1)


def linear(x: Tensor, params: ModelParams, prefix: str, suffix: str = "") -> Tensor:
    y = x @ params[f"{prefix}.w{suffix}"]
    bias = params.tensors.get(f"{prefix}.b{suffix}")
    return y if bias is None else y + bias


def affine_norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.layer_norm(x) * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def feed_forward(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return linear(ad.relu(linear(x, params, prefix, "1")), params, prefix, "2")


def scaled_dot_attention(q, k, v, log: list | None = None) -> Tensor:
    """softmax(q k^T / sqrt(D)) v over the last two axes; D is q's feature size."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ad.ShapeError("attention", f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError("attention", f"{k.shape[-2]} keys but {v.shape[-2]} values")
    kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    weights = ad.softmax(ad.scale(q @ kt, 1.0 / math.sqrt(q.shape[-1])), axis=-1)
    if log is not None:
        log.append(weights.data)
    return weights @ v


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, params: ModelParams,
                         prefix: str, heads: int, log: list | None = None) -> Tensor:
    d = query.shape[-1]
    if key.shape[-1] != d or value.shape[-1] != d:
        raise ad.ShapeError("attention", f"token dims differ: {query.shape}, {key.shape}, {value.shape}")
    dh = d // heads

    def split(x):
        return ad.transpose(x.reshape(x.shape[0], heads, dh), (1, 0, 2))

    q = split(linear(query, params, prefix, "q"))
    k = split(linear(key, params, prefix, "k"))
    v = split(linear(value, params, prefix, "v"))
    out = scaled_dot_attention(q, k, v, log)             # (heads, n, dh)
    out = ad.transpose(out, (1, 0, 2)).reshape(query.shape[0], d)
    return linear(out, params, prefix, "o")


# ---------------------------------------------------------------------------
# network stages
# ---------------------------------------------------------------------------

def _check_clip(frames: np.ndarray, config: ModelConfig) -> None:
    expected = (config.frames, config.crop_size, config.crop_size, 3)
    if frames.shape != expected:
        raise ad.ShapeError("model", f"clip shape {frames.shape}, expected {expected}")


def backbone_forward(frames, params: ModelParams) -> Tensor:
    """(T, crop, crop, 3) frames -> (T, d, h', w') features, same weights for every frame."""
    cfg = params.config
    x = ad.as_tensor(frames)
    if x.ndim != 4 or x.shape[1:] != (cfg.crop_size, cfg.crop_size, 3):
        raise ad.ShapeError("backbone", f"frames of shape {x.shape}, expected (T, {cfg.crop_size}, "
                                        f"{cfg.crop_size}, 3)")
    x = ad.transpose(x, (0, 3, 1, 2))
    for i in range(len(cfg.backbone_channels)):
        x = ad.relu(conv_layer(x, params, f"backbone.{i}", stride=2, padding=1))
    return conv_layer(x, params, "backbone.proj")


def density_branch(features: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Returns density features (T, d', h', w') and density maps (T, crop, crop)."""
    cfg = params.config
    if features.ndim != 4 or features.shape[1] != cfg.token_dim:
        raise ad.ShapeError("density_branch", f"features {features.shape}, expected d={cfg.token_dim}")
    f = ad.relu(conv_layer(features, params, "density.conv1", padding=1))
    f = ad.relu(conv_layer(f, params, "density.conv2", padding=1))
    low = ad.relu(conv_layer(f, params, "density.head"))
    dense = ad.upsample_bilinear(low, (cfg.crop_size, cfg.crop_size))
    t = features.shape[0]
    return f, dense.reshape(t, cfg.crop_size, cfg.crop_size)


def temporal_attention(density_features: Tensor, reference_frame: int, params: ModelParams,
                       log: list | None = None) -> Tensor:
    """Single-head attention across frames at every spatial location.

    Returns the reference-frame output tokens, shape (h'*w', d').
    """
    t, dd, h, w = density_features.shape
    if t != params.config.frames:
        raise ad.ShapeError("temporal_attention", f"{t} frames, model configured for {params.config.frames}")
    x = ad.transpose(density_features.reshape(t, dd, h * w), (2, 0, 1))   # (P, T, d')
    x = x + params["temporal.pos"]
    ref = x[:, reference_frame:reference_frame + 1, :]
    q = linear(ref, params, "temporal", "q")
    k = linear(x, params, "temporal", "k")
    v = linear(x, params, "temporal", "v")
    out = scaled_dot_attention(q, k, v, log)                              # (P, 1, d')
    return out.reshape(h * w, dd)


def encoder_forward(image_tokens: Tensor, ta_tokens: Tensor, params: ModelParams,
                    log: list | None = None) -> Tensor:
    """Density-enhanced encoder over the reference frame.

    Each layer: ``F' = MSA(LN(F + inject(TA)))`` then ``F = F' + FC(LN(F'))``.
    ``image_tokens`` already carries the sine positions.
    """
    cfg = params.config
    n, d = image_tokens.shape
    if ta_tokens.shape[0] != n or ta_tokens.shape[1] != cfg.density_feature_dim or d != cfg.token_dim:
        raise ad.ShapeError("encoder", f"tokens {image_tokens.shape} vs temporal {ta_tokens.shape}")
    inject = linear(ta_tokens, params, "encoder.inject")
    f = image_tokens
    for layer in range(cfg.encoder_layers):
        p = f"encoder.{layer}"
        x = affine_norm(f + inject, params, f"{p}.ln1")
        f_mid = multi_head_attention(x, x, x, params, f"{p}.attn", cfg.attention_heads, log)
        f = f_mid + feed_forward(affine_norm(f_mid, params, f"{p}.ln2"), params, f"{p}.ffn")
    return f


def build_queries(ta_tokens: Tensor, params: ModelParams, mode: str | None = None) -> Tensor:
    """Density-guided queries: learned embeddings combined with a strided-conv
    summary of the temporal density tokens."""
    cfg = params.config
    mode = cfg.query_mode if mode is None else mode
    if mode not in ("add", "concat"):
        raise ValueError(f"unknown query mode {mode!r}")
    h = w = cfg.feature_size
    g = cfg.query_grid
    grid = ad.transpose(ta_tokens, (1, 0)).reshape(1, cfg.density_feature_dim, h, w)
    summary = conv_layer(grid, params, "queries.conv", stride=h // g)        # (1, d, g, g)
    tokens = ad.transpose(summary.reshape(cfg.token_dim, g * g), (1, 0))
    embed = params["queries.embed"]
    if mode == "add":
        return embed + tokens
    if "queries.fuse.w" not in params.tensors:
        raise ValueError("concat queries need 'queries.fuse' parameters (model built in add mode)")
    return linear(ad.concat([embed, tokens], axis=1), params, "queries.fuse")


def decoder_forward(queries: Tensor, memory: Tensor, memory_pos, params: ModelParams,
                    log: list | None = None) -> Tensor:
    """Post-norm decoder: self-attention, cross-attention to memory, feed-forward."""
    cfg = params.config
    if queries.shape[-1] != memory.shape[-1]:
        raise ad.ShapeError("decoder", f"query dim {queries.shape[-1]} != memory dim {memory.shape[-1]}")
    keys = memory + memory_pos
    q = queries
    for layer in range(cfg.decoder_layers):
        p = f"decoder.{layer}"
        sa = multi_head_attention(q, q, q, params, f"{p}.self_attn", cfg.attention_heads, log)
        q = affine_norm(q + sa, params, f"{p}.ln1")
        ca = multi_head_attention(q, keys, memory, params, f"{p}.cross_attn", cfg.attention_heads, log)
        q = affine_norm(q + ca, params, f"{p}.ln2")
        q = affine_norm(q + feed_forward(q, params, f"{p}.ffn"), params, f"{p}.ln3")
    return q


def prediction_heads(embeddings: Tensor, params: ModelParams) -> PointPredictionSet:
    hidden = ad.relu(linear(embeddings, params, "head.reg", "1"))
    points = ad.sigmoid(linear(hidden, params, "head.reg", "2"))
    logits = linear(embeddings, params, "head.cls")
    conf = ad.sigmoid(logits.reshape(embeddings.shape[0]))
    return PointPredictionSet(points, conf)


def model_forward(clip, params: ModelParams, config: ModelConfig | None = None,
                  log: list | None = None) -> tuple[PointPredictionSet, Tensor]:
    """Run the full network on a (T, crop, crop, 3) clip.

    Returns the reference-frame point predictions and the density maps of
    all T frames, shape (T, crop, crop).
    """
    cfg = params.config if config is None else config
    clip = np.asarray(clip, dtype=np.float64)
    _check_clip(clip, cfg)
    feats = backbone_forward(clip, params)
    dm_feats, density = density_branch(feats, params)
    ta = temporal_attention(dm_feats, cfg.reference_frame, params, log)

    h = cfg.feature_size
    pos = sine_positions(h, h, cfg.token_dim)
    ref = feats[cfg.reference_frame]                                       # (d, h', w')
    tokens = ad.transpose(ref.reshape(cfg.token_dim, h * h), (1, 0)) + pos
    memory = encoder_forward(tokens, ta, params, log)
    queries = build_queries(ta, params)
    emb = decoder_forward(queries, memory, pos, params, log)
    return prediction_heads(emb, params), density
