"""UniConvNet assembly: stem, four stages of basic blocks, downsampling, head.

Each basic block stacks three pre-norm residual components, each scaled by a
learnable per-channel layer scale:

    y1 = x  + s1 * rfa(LN(x))
    y2 = y1 + s2 * dw3x3(LN(y1))
    y3 = y2 + s3 * ffn(LN(y2))
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import ops
from .rfa import ConfigError, RfaConfig, init_conv, init_rfa_params, rfa_forward
from .tensor import Rng, ShapeError, Tape, Tensor, backward, resolve_dtype

DOWNSAMPLE_FACTOR = 32
SMALL_CONVS = ("dw3x3",)


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]
    rfa: RfaConfig = field(default_factory=RfaConfig)
    ffn_ratio: float = 4.0
    num_classes: int = 1000
    layer_scale_init: float = 1e-6
    small_conv: str = "dw3x3"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels", f"need 4 stages, got {len(self.stage_channels)}")
        if len(self.stage_depths) != 4:
            raise ConfigError("stage_depths", f"need 4 stages, got {len(self.stage_depths)}")
        heads = self.rfa.layer_count + 1
        for c in self.stage_channels:
            if c < 2 or c % heads:
                raise ConfigError(
                    "stage_channels", f"{c} is not divisible by layer_count + 1 = {heads}"
                )
        if self.stage_channels[0] % 2:
            raise ConfigError("stage_channels", "first stage width must be even (stem halves it)")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError("stage_depths", f"depths must be non-negative, got {self.stage_depths}")
        if self.ffn_ratio <= 0:
            raise ConfigError("ffn_ratio", f"must be positive, got {self.ffn_ratio}")
        if self.num_classes < 1:
            raise ConfigError("num_classes", f"must be positive, got {self.num_classes}")
        if self.small_conv not in SMALL_CONVS:
            raise ConfigError("small_conv", f"only {SMALL_CONVS} is available, got {self.small_conv!r}")

    def ffn_hidden(self, channels: int) -> int:
        return int(round(self.ffn_ratio * channels))

    def rfa_for(self, stage: int) -> RfaConfig:
        return self.rfa.with_channels(self.stage_channels[stage])


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration used by the test and smoke workflows."""
    base = dict(stage_channels=(8, 16, 24, 32), stage_depths=(1, 1, 2, 1), num_classes=10)
    base.update(overrides)
    return ModelConfig(**base)


def a_like_config(**overrides) -> ModelConfig:
    """Roughly UniConvNet-A sized configuration (about 3.4M params, 0.6G MACs at 224)."""
    base = dict(stage_channels=(32, 64, 128, 256), stage_depths=(2, 2, 6, 2), num_classes=1000)
    base.update(overrides)
    return ModelConfig(**base)


def check_input_extent(h: int, w: int) -> None:
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR or h < 1 or w < 1:
        raise ShapeError(f"input extent {h}x{w} must be a positive multiple of {DOWNSAMPLE_FACTOR}")


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        """Wrap parameters as tensors: tape leaves when ``tape`` is given, else constants."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.leaf(v, tag=k) for k, v in self.params.items()}

    def astype(self, dtype) -> "Model":
        dtype = resolve_dtype(dtype)
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.config, dict(params))

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def _init_norm(params: dict, name: str, channels: int, dtype) -> None:
    params[f"{name}.gamma"] = np.ones(channels, dtype=dtype)
    params[f"{name}.beta"] = np.zeros(channels, dtype=dtype)


def build_model(cfg: ModelConfig, rng: Rng, dtype=None, init: str = "trunc_normal") -> Model:
    """Initialize every parameter: truncated-normal weights, zero biases,
    unit/zero LayerNorm affines and constant layer scales."""
    dtype = resolve_dtype(dtype)
    p: dict[str, np.ndarray] = {}
    c0 = cfg.stage_channels[0]
    init_conv(p, "stem.conv1", (c0 // 2, 3, 3, 3), rng, dtype, init)
    _init_norm(p, "stem.norm1", c0 // 2, dtype)
    init_conv(p, "stem.conv2", (c0, c0 // 2, 3, 3), rng, dtype, init)
    _init_norm(p, "stem.norm2", c0, dtype)
    for s, (C, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        if s > 0:
            _init_norm(p, f"downsample.{s - 1}.norm", cfg.stage_channels[s - 1], dtype)
            init_conv(p, f"downsample.{s - 1}.conv", (C, cfg.stage_channels[s - 1], 3, 3), rng, dtype, init)
        for b in range(depth):
            blk = f"stages.{s}.blocks.{b}"
            _init_norm(p, f"{blk}.norm1", C, dtype)
            p.update(init_rfa_params(cfg.rfa_for(s), rng, prefix=f"{blk}.rfa", dtype=dtype, init=init))
            p[f"{blk}.scale1"] = np.full(C, cfg.layer_scale_init, dtype=dtype)
            _init_norm(p, f"{blk}.norm2", C, dtype)
            init_conv(p, f"{blk}.dw", (C, 1, 3, 3), rng, dtype, init)
            p[f"{blk}.scale2"] = np.full(C, cfg.layer_scale_init, dtype=dtype)
            _init_norm(p, f"{blk}.norm3", C, dtype)
            hidden = cfg.ffn_hidden(C)
            init_conv(p, f"{blk}.ffn.fc1", (hidden, C, 1, 1), rng, dtype, init)
            init_conv(p, f"{blk}.ffn.fc2", (C, hidden, 1, 1), rng, dtype, init)
            p[f"{blk}.scale3"] = np.full(C, cfg.layer_scale_init, dtype=dtype)
    c_last = cfg.stage_channels[-1]
    _init_norm(p, "head.norm", c_last, dtype)
    if init == "trunc_normal":
        w = rng.truncated_normal((cfg.num_classes, c_last), 0.02)
    else:
        w = rng.uniform((cfg.num_classes, c_last), 0.1, 0.3)
    p["head.linear.weight"] = w.astype(dtype)
    p["head.linear.bias"] = np.zeros(cfg.num_classes, dtype=dtype)
    return Model(cfg, p)


def _norm(P: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ops.layer_norm_channels(x, P[f"{name}.gamma"], P[f"{name}.beta"])


def stem_forward(x: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    H, W = x.shape[2:]
    if H % 4 or W % 4:
        raise ShapeError(f"stem: input extent {H}x{W} is not divisible by 4")
    y = ops.conv2d(x, P["stem.conv1.weight"], P["stem.conv1.bias"], stride=2, padding=1)
    y = ops.gelu(_norm(P, "stem.norm1", y))
    y = ops.conv2d(y, P["stem.conv2.weight"], P["stem.conv2.bias"], stride=2, padding=1)
    return _norm(P, "stem.norm2", y)


def downsample_forward(x: Tensor, P: Mapping[str, Tensor], index: int) -> Tensor:
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError(f"downsample: input extent {H}x{W} is not even")
    name = f"downsample.{index}"
    y = _norm(P, f"{name}.norm", x)
    return ops.conv2d(y, P[f"{name}.conv.weight"], P[f"{name}.conv.bias"], stride=2, padding=1)


def basic_block_forward(x: Tensor, P: Mapping[str, Tensor], prefix: str, rfa_cfg: RfaConfig) -> Tensor:
    C = x.shape[1]
    if C != rfa_cfg.channels:
        raise ShapeError(f"{prefix}: input has {C} channels, block expects {rfa_cfg.channels}")
    r = rfa_forward(_norm(P, f"{prefix}.norm1", x), P, rfa_cfg, prefix=f"{prefix}.rfa")
    y = ops.add(x, ops.scale_channels(r, P[f"{prefix}.scale1"]))

    d = ops.conv2d(_norm(P, f"{prefix}.norm2", y), P[f"{prefix}.dw.weight"], P[f"{prefix}.dw.bias"],
                   padding=1, groups=C)
    y = ops.add(y, ops.scale_channels(d, P[f"{prefix}.scale2"]))

    f = ops.conv2d(_norm(P, f"{prefix}.norm3", y), P[f"{prefix}.ffn.fc1.weight"], P[f"{prefix}.ffn.fc1.bias"])
    f = ops.conv2d(ops.gelu(f), P[f"{prefix}.ffn.fc2.weight"], P[f"{prefix}.ffn.fc2.bias"])
    return ops.add(y, ops.scale_channels(f, P[f"{prefix}.scale3"]))


def features_forward(model: Model, x: Tensor, P: Mapping[str, Tensor] | None = None) -> Tensor:
    """Stage-4 feature map (before pooling)."""
    cfg = model.config
    if P is None:
        P = model.bind()
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"model expects (B, 3, H, W) input, got {x.shape}")
    check_input_extent(*x.shape[2:])
    y = stem_forward(x, P)
    for s, depth in enumerate(cfg.stage_depths):
        if s > 0:
            y = downsample_forward(y, P, s - 1)
        rfa_cfg = cfg.rfa_for(s)
        for b in range(depth):
            y = basic_block_forward(y, P, f"stages.{s}.blocks.{b}", rfa_cfg)
    return y


def model_forward(model: Model, x: Tensor, P: Mapping[str, Tensor] | None = None) -> Tensor:
    """Logits of shape (B, num_classes)."""
    if P is None:
        P = model.bind()
    y = ops.global_avg_pool(features_forward(model, x, P))
    y = _norm(P, "head.norm", y)
    y = ops.linear(y, P["head.linear.weight"], P["head.linear.bias"])
    return ops.flatten_logits(y)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        g = grads[k]
        if g.shape != v.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {v.shape}")
        out[k] = (v - lr * g).astype(v.dtype)
    return out


def loss_and_grads(model: Model, x: np.ndarray, labels) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    P = model.bind(tape)
    loss = ops.softmax_cross_entropy(model_forward(model, Tensor(x), P), labels)
    g = backward(tape, loss, np.ones((), dtype=loss.dtype))
    return float(loss.data), {k: g[t.id] for k, t in P.items()}


def overfit(
    model: Model, x: np.ndarray, labels, steps: int, lr: float
) -> tuple[Model, list[float]]:
    """Plain SGD on a fixed batch; returns the final model and per-step losses."""
    losses = []
    for _ in range(steps):
        loss, grads = loss_and_grads(model, x, labels)
        losses.append(loss)
        model = model.with_params(sgd_step(model.params, grads, lr))
    return model, losses


def overfit_problem(cfg: ModelConfig, rng: Rng, samples: int = 16, classes: int = 2,
                    size: int = 32, dtype=None) -> tuple[Model, np.ndarray, np.ndarray]:
    """Standard-normal inputs with balanced labels and a freshly built model.

    Inputs are zero-mean, as after the usual per-channel normalization.  With
    raw [0, 1] inputs the shared DC component dominates: SGD grows the stem
    bias until the channel norms see near-identical vectors for every sample,
    and the loss parks at ln(classes).
    """
    cfg = replace(cfg, num_classes=classes)
    model = build_model(cfg, rng, dtype=dtype)
    x = rng.normal((samples, 3, size, size)).astype(model.dtype)
    labels = np.arange(samples) % classes
    return model, x, labels
