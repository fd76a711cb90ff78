"""Layer Operator and the N-layer Receptive Field Aggregator.

The aggregator splits its input into N+1 channel heads ``A_1, H_1..H_N``
(in that channel order), projects each head with a 1x1 convolution and then
folds Layer Operators over n = 1..N.  Operator n consumes the running tensor
``A_n`` (n*C/(N+1) channels) and the fresh head ``H_n`` (C/(N+1) channels):

    a1, a2, h = proj_a1(A_n), proj_a2(A_n), proj_h(H_n)
    amp = a2 * gelu(dw_KxK(a1))
    dis = fuse(dw_KxK(h) + dw_kxk(h))          # dis_topology="sum"
    dis = fuse(dw_kxk(dw_KxK(h)))              # dis_topology="sequential"
    A_{n+1} = concat(amp, dis)

Parameters live in a flat ``{name: array}`` mapping; forward functions take
the same mapping with values wrapped as tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .tensor import Rng, ShapeError, Tensor, concat_channels, resolve_dtype, split_channels

INIT_STD = 0.02
DIS_TOPOLOGIES = ("sum", "sequential")


class ConfigError(ValueError):
    """A configuration field violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


def kernel_schedule(n: int, layer_count: int | None = None) -> int:
    """Large kernel size of Layer Operator ``n`` (1-based): 2n + 5."""
    upper = layer_count if layer_count is not None else n
    if not 1 <= n <= upper:
        raise IndexError(f"layer index {n} outside 1..{upper}")
    return 2 * n + 5


@dataclass(frozen=True)
class RfaConfig:
    layer_count: int = 3
    channels: int = 64
    large_kernels: tuple[int, ...] | None = None
    small_kernel: int = 3
    schedule_mode: str = "formula"
    dis_topology: str = "sum"
    amp_projection: bool = False

    def __post_init__(self):
        N = self.layer_count
        if not isinstance(N, int) or N < 1:
            raise ConfigError("layer_count", f"must be a positive integer, got {N!r}")
        if self.schedule_mode == "formula":
            kernels = tuple(kernel_schedule(n, N) for n in range(1, N + 1))
            if self.large_kernels is not None and tuple(self.large_kernels) != kernels:
                raise ConfigError("large_kernels", f"formula schedule gives {kernels}, got {self.large_kernels}")
            object.__setattr__(self, "large_kernels", kernels)
        elif self.schedule_mode == "explicit":
            if self.large_kernels is None or len(self.large_kernels) != N:
                raise ConfigError("large_kernels", f"explicit schedule needs {N} kernel sizes")
            object.__setattr__(self, "large_kernels", tuple(int(k) for k in self.large_kernels))
        else:
            raise ConfigError("schedule_mode", f"must be 'formula' or 'explicit', got {self.schedule_mode!r}")
        if any(k < 3 or k % 2 == 0 for k in self.large_kernels):
            raise ConfigError("large_kernels", f"kernel sizes must be odd and >= 3, got {self.large_kernels}")
        if self.small_kernel < 3 or self.small_kernel % 2 == 0:
            raise ConfigError("small_kernel", f"must be odd and >= 3, got {self.small_kernel}")
        if self.small_kernel > min(self.large_kernels):
            raise ConfigError("small_kernel", f"{self.small_kernel} exceeds smallest large kernel {min(self.large_kernels)}")
        if self.channels < 1 or self.channels % (N + 1):
            raise ConfigError("channels", f"{self.channels} is not divisible by layer_count + 1 = {N + 1}")
        if self.dis_topology not in DIS_TOPOLOGIES:
            raise ConfigError("dis_topology", f"must be one of {DIS_TOPOLOGIES}, got {self.dis_topology!r}")

    @property
    def head_channels(self) -> int:
        return self.channels // (self.layer_count + 1)

    def with_channels(self, channels: int) -> "RfaConfig":
        return RfaConfig(
            layer_count=self.layer_count,
            channels=channels,
            large_kernels=self.large_kernels,
            small_kernel=self.small_kernel,
            schedule_mode=self.schedule_mode,
            dis_topology=self.dis_topology,
            amp_projection=self.amp_projection,
        )


@dataclass(frozen=True)
class TheoreticalRf:
    amp_chain_rf: int
    dis_rf_per_layer: tuple[int, ...] = field(default_factory=tuple)


def theoretical_rf(cfg: RfaConfig) -> TheoreticalRf:
    """Receptive-field extents of the amp chain and of each layer's Dis branch.

    A_{n+1} concatenates amp_n and dis_n, so the chain grows from whichever
    is wider.  With the summed Dis branch that is always the amp side and the
    extent is 1 + sum(K_n - 1); a sequential Dis can overtake it.
    """
    if cfg.dis_topology == "sum":
        dis = tuple(cfg.large_kernels)
    else:
        dis = tuple(K + cfg.small_kernel - 1 for K in cfg.large_kernels)
    running = 1
    for n, K in enumerate(cfg.large_kernels):
        amp = running + K - 1
        running = max(amp, dis[n])
    return TheoreticalRf(amp, dis)


def _conv_shapes(cfg: RfaConfig) -> dict[str, tuple[int, int, int, int]]:
    """Weight shapes of every convolution, keyed by name relative to the RFA."""
    c = cfg.head_channels
    k = cfg.small_kernel
    shapes: dict[str, tuple[int, int, int, int]] = {}
    for i in range(cfg.layer_count + 1):
        shapes[f"heads.{i}"] = (c, c, 1, 1)
    for n in range(1, cfg.layer_count + 1):
        K = cfg.large_kernels[n - 1]
        nc = n * c
        shapes[f"lo{n}.proj_a1"] = (nc, nc, 1, 1)
        shapes[f"lo{n}.proj_a2"] = (nc, nc, 1, 1)
        shapes[f"lo{n}.proj_h"] = (c, c, 1, 1)
        shapes[f"lo{n}.dw_large_amp"] = (nc, 1, K, K)
        if cfg.amp_projection:
            shapes[f"lo{n}.proj_amp"] = (nc, nc, 1, 1)
        shapes[f"lo{n}.dw_large_dis"] = (c, 1, K, K)
        shapes[f"lo{n}.dw_small_dis"] = (c, 1, k, k)
        shapes[f"lo{n}.fuse_dis"] = (c, c, 1, 1)
    return shapes


def init_conv(params: dict, name: str, shape, rng: Rng, dtype, init: str = "trunc_normal") -> None:
    if init == "trunc_normal":
        w = rng.truncated_normal(shape, INIT_STD)
    elif init == "generic":
        # Bounded away from zero so gradient supports are exact.
        w = rng.uniform(shape, 0.1, 0.3)
    else:
        raise ValueError(f"unknown init {init!r}")
    params[f"{name}.weight"] = w.astype(dtype)
    params[f"{name}.bias"] = np.zeros(shape[0], dtype=dtype)


def init_rfa_params(
    cfg: RfaConfig, rng: Rng, prefix: str = "rfa", dtype=None, init: str = "trunc_normal"
) -> dict[str, np.ndarray]:
    dtype = resolve_dtype(dtype)
    params: dict[str, np.ndarray] = {}
    for name, shape in _conv_shapes(cfg).items():
        init_conv(params, f"{prefix}.{name}", shape, rng, dtype, init)
    return params


def _pointwise(P: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ops.conv2d(x, P[f"{name}.weight"], P[f"{name}.bias"])


def _depthwise(P: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    w = P[f"{name}.weight"]
    K = w.shape[-1]
    return ops.conv2d(x, w, P[f"{name}.bias"], padding=(K - 1) // 2, groups=x.shape[1])


def layer_operator_forward(
    A_n: Tensor, H_n: Tensor, P: Mapping[str, Tensor], n: int, cfg: RfaConfig, prefix: str = "rfa"
) -> Tensor:
    c = cfg.head_channels
    if A_n.shape[1] != n * c or H_n.shape[1] != c:
        raise ShapeError(
            f"layer operator {n}: expected {n * c} + {c} input channels, "
            f"got {A_n.shape[1]} + {H_n.shape[1]}"
        )
    if A_n.shape[0] != H_n.shape[0] or A_n.shape[2:] != H_n.shape[2:]:
        raise ShapeError(f"layer operator {n}: A {A_n.shape} and H {H_n.shape} disagree")
    lo = f"{prefix}.lo{n}"
    a1 = _pointwise(P, f"{lo}.proj_a1", A_n)
    a2 = _pointwise(P, f"{lo}.proj_a2", A_n)
    h = _pointwise(P, f"{lo}.proj_h", H_n)

    amp = ops.elementwise_mul(a2, ops.gelu(_depthwise(P, f"{lo}.dw_large_amp", a1)))
    if cfg.amp_projection:
        amp = _pointwise(P, f"{lo}.proj_amp", amp)

    if cfg.dis_topology == "sum":
        dis = ops.add(_depthwise(P, f"{lo}.dw_large_dis", h), _depthwise(P, f"{lo}.dw_small_dis", h))
    else:
        dis = _depthwise(P, f"{lo}.dw_small_dis", _depthwise(P, f"{lo}.dw_large_dis", h))
    dis = _pointwise(P, f"{lo}.fuse_dis", dis)
    return concat_channels([amp, dis])


def rfa_forward(x: Tensor, P: Mapping[str, Tensor], cfg: RfaConfig, prefix: str = "rfa") -> Tensor:
    N, c = cfg.layer_count, cfg.head_channels
    if x.shape[1] != cfg.channels:
        raise ShapeError(f"rfa: input has {x.shape[1]} channels, config expects {cfg.channels}")
    heads = split_channels(x, [c] * (N + 1))
    heads = [_pointwise(P, f"{prefix}.heads.{i}", t) for i, t in enumerate(heads)]
    A = heads[0]
    for n in range(1, N + 1):
        A = layer_operator_forward(A, heads[n], P, n, cfg, prefix)
        if A.shape[1] != (n + 1) * c:
            raise AssertionError(f"channel pyramid broken after layer {n}: {A.shape[1]} channels")
    return A


def channel_trace(cfg: RfaConfig, spatial: int = 8) -> list[int]:
    """Running channel counts after each Layer Operator, from a real forward pass."""
    rng = Rng(0)
    P = {k: Tensor(v) for k, v in init_rfa_params(cfg, rng).items()}
    c = cfg.head_channels
    heads = split_channels(Tensor(np.zeros((1, cfg.channels, spatial, spatial), np.float32)), [c] * (cfg.layer_count + 1))
    A = heads[0]
    trace = []
    for n in range(1, cfg.layer_count + 1):
        A = layer_operator_forward(A, heads[n], P, n, cfg)
        trace.append(A.shape[1])
    return trace
