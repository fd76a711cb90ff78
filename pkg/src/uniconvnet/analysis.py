"""Cost accounting, receptive-field verification, ERF maps and AGD metrics."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ops
from .model import Model, ModelConfig, check_input_extent, features_forward, model_forward
from .tensor import Rng, Tape, Tensor, backward

CATEGORIES = ("rfa", "small_conv", "ffn", "stem_downsample", "head")
AREA_THRESHOLDS = (0.2, 0.5, 0.9)


class DegenerateInputError(ValueError):
    """The map carries no mass (all zeros), so the metric is undefined."""


class RfSupportError(RuntimeError):
    """The gradient support reached the input border and may be cropped."""


# --------------------------------------------------------------------------
# parameter / MAC accounting


@dataclass
class Cost:
    params: int = 0
    macs: int = 0
    elementwise: int = 0


@dataclass
class CostBreakdown:
    categories: dict[str, Cost] = field(default_factory=lambda: {c: Cost() for c in CATEGORIES})

    @property
    def params(self) -> int:
        return sum(c.params for c in self.categories.values())

    @property
    def macs(self) -> int:
        return sum(c.macs for c in self.categories.values())

    @property
    def elementwise(self) -> int:
        return sum(c.elementwise for c in self.categories.values())

    def rows(self) -> list[tuple[str, int, int, int]]:
        rows = [(k, v.params, v.macs, v.elementwise) for k, v in self.categories.items()]
        rows.append(("total", self.params, self.macs, self.elementwise))
        return rows


def category_of(name: str) -> str:
    """Accounting bucket of a hierarchical parameter name."""
    if name.startswith(("stem.", "downsample.")):
        return "stem_downsample"
    if name.startswith("head."):
        return "head"
    branch = name.split(".")[4]
    if branch in ("norm1", "rfa", "scale1"):
        return "rfa"
    if branch in ("norm2", "dw", "scale2"):
        return "small_conv"
    if branch in ("norm3", "ffn", "scale3"):
        return "ffn"
    raise KeyError(f"no accounting category for parameter {name!r}")


@dataclass(frozen=True)
class LayerCost:
    """One layer of the analytic walk over a configuration."""

    category: str
    kind: str
    params: int
    macs: int
    elementwise: int


def _conv(cat, c_in, c_out, k, groups, h_out, w_out) -> LayerCost:
    params = c_out * (c_in // groups) * k * k + c_out
    macs = h_out * w_out * c_out * (c_in // groups) * k * k
    return LayerCost(cat, f"conv{k}x{k}", params, macs, 0)


def _norm(cat, c, hw) -> LayerCost:
    return LayerCost(cat, "layer_norm", 2 * c, 0, c * hw)


def _eltwise(cat, kind, n) -> LayerCost:
    return LayerCost(cat, kind, 0, 0, n)


def layer_costs(cfg: ModelConfig, input_hw: tuple[int, int] = (224, 224)) -> list[LayerCost]:
    """Closed-form cost of every layer, derived from the configuration alone."""
    H, W = input_hw
    check_input_extent(H, W)
    out: list[LayerCost] = []
    c0 = cfg.stage_channels[0]
    h, w = H // 2, W // 2
    out += [_conv("stem_downsample", 3, c0 // 2, 3, 1, h, w), _norm("stem_downsample", c0 // 2, h * w),
            _eltwise("stem_downsample", "gelu", c0 // 2 * h * w)]
    h, w = h // 2, w // 2
    out += [_conv("stem_downsample", c0 // 2, c0, 3, 1, h, w), _norm("stem_downsample", c0, h * w)]
    for s, (C, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        if s > 0:
            prev = cfg.stage_channels[s - 1]
            out.append(_norm("stem_downsample", prev, h * w))
            h, w = h // 2, w // 2
            out.append(_conv("stem_downsample", prev, C, 3, 1, h, w))
        hw = h * w
        rcfg = cfg.rfa_for(s)
        c = rcfg.head_channels
        for _ in range(depth):
            out.append(_norm("rfa", C, hw))
            out += [_conv("rfa", c, c, 1, 1, h, w) for _ in range(rcfg.layer_count + 1)]
            for n, K in enumerate(rcfg.large_kernels, start=1):
                nc = n * c
                out += [
                    _conv("rfa", nc, nc, 1, 1, h, w),
                    _conv("rfa", nc, nc, 1, 1, h, w),
                    _conv("rfa", c, c, 1, 1, h, w),
                    _conv("rfa", nc, nc, K, nc, h, w),
                    _eltwise("rfa", "gelu", nc * hw),
                    _eltwise("rfa", "mul", nc * hw),
                    _conv("rfa", c, c, K, c, h, w),
                    _conv("rfa", c, c, rcfg.small_kernel, c, h, w),
                    _conv("rfa", c, c, 1, 1, h, w),
                ]
                if rcfg.amp_projection:
                    out.append(_conv("rfa", nc, nc, 1, 1, h, w))
                if rcfg.dis_topology == "sum":
                    out.append(_eltwise("rfa", "add", c * hw))
            out += [LayerCost("rfa", "layer_scale", C, 0, C * hw), _eltwise("rfa", "add", C * hw)]

            out += [_norm("small_conv", C, hw), _conv("small_conv", C, C, 3, C, h, w),
                    LayerCost("small_conv", "layer_scale", C, 0, C * hw), _eltwise("small_conv", "add", C * hw)]

            hid = cfg.ffn_hidden(C)
            out += [_norm("ffn", C, hw), _conv("ffn", C, hid, 1, 1, h, w), _eltwise("ffn", "gelu", hid * hw),
                    _conv("ffn", hid, C, 1, 1, h, w),
                    LayerCost("ffn", "layer_scale", C, 0, C * hw), _eltwise("ffn", "add", C * hw)]
    C = cfg.stage_channels[-1]
    out += [_eltwise("head", "avg_pool", C * h * w), _norm("head", C, 1),
            LayerCost("head", "linear", C * cfg.num_classes + cfg.num_classes, C * cfg.num_classes, 0)]
    return out


def _breakdown(costs: Sequence[LayerCost]) -> CostBreakdown:
    bd = CostBreakdown()
    for lc in costs:
        c = bd.categories[lc.category]
        c.params += lc.params
        c.macs += lc.macs
        c.elementwise += lc.elementwise
    return bd


def count_params(m: Model | ModelConfig) -> CostBreakdown:
    """Parameter counts per category from closed-form layer formulas."""
    cfg = m.config if isinstance(m, Model) else m
    bd = _breakdown(layer_costs(cfg, (32, 32)))
    for c in bd.categories.values():
        c.macs = c.elementwise = 0
    return bd


def count_flops(m: Model | ModelConfig, input_hw: tuple[int, int] = (224, 224)) -> CostBreakdown:
    """Parameters plus MACs (reported as FLOPs) and elementwise op counts."""
    cfg = m.config if isinstance(m, Model) else m
    return _breakdown(layer_costs(cfg, input_hw))


def enumerate_params(m: Model) -> CostBreakdown:
    """Count parameters by visiting every stored array element."""
    bd = CostBreakdown()
    for name, arr in m.params.items():
        n = 0
        for _ in np.nditer(arr):
            n += 1
        bd.categories[category_of(name)].params += n
    return bd


def instrumented_macs(m: Model, input_hw: tuple[int, int]) -> ops.OpCounter:
    """Run one forward pass and tally the multiplies the kernels perform."""
    x = Tensor(np.zeros((1, 3, *input_hw), dtype=m.dtype))
    with ops.count_ops() as counter:
        model_forward(m, x)
    return counter


# --------------------------------------------------------------------------
# receptive-field support


@dataclass(frozen=True)
class SupportBox:
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


def support_box(mask: np.ndarray) -> SupportBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise RfSupportError("gradient is identically zero; no support to measure")
    return SupportBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def empirical_rf_support(
    f: Callable[[Tensor], Tensor],
    input_shape: Sequence[int],
    rng: Rng,
    groups: Mapping[str, tuple[int, int]] | None = None,
) -> dict[str, SupportBox]:
    """Bounding box of nonzero input gradient for the center output pixel.

    ``groups`` maps a label to an output channel range [lo, hi); the whole
    output is one group by default.  Inputs are uniform in [0.1, 1] so that no
    gradient vanishes by accident; run in float64 with zero biases.
    """
    x = rng.uniform(tuple(input_shape), 0.1, 1.0)
    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    B, C, Ho, Wo = y.shape
    groups = groups or {"all": (0, C)}
    H, W = input_shape[2:]
    result = {}
    for name, (lo, hi) in groups.items():
        seed = np.zeros(y.shape, dtype=y.dtype)
        seed[:, lo:hi, Ho // 2, Wo // 2] = 1.0
        g = backward(tape, y, seed)[xt.id]
        box = support_box(np.abs(g).sum(axis=(0, 1)) > 0)
        if box.top == 0 or box.left == 0 or box.bottom == H - 1 or box.right == W - 1:
            raise RfSupportError(
                f"group {name!r}: support {box.size} touches the border of a {H}x{W} input"
            )
        result[name] = box
    return result


# --------------------------------------------------------------------------
# effective receptive field


@dataclass
class ErfMap:
    grid: np.ndarray
    sample_count: int
    input_kind: str
    center: tuple[int, int]


def _erf_batch(features: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    tape = Tape()
    xt = tape.leaf(x)
    feats = features(xt)
    seed = np.zeros(feats.shape, dtype=feats.dtype)
    seed[:, :, feats.shape[2] // 2, feats.shape[3] // 2] = 1.0
    g = backward(tape, feats, seed)[xt.id]
    return np.abs(g.astype(np.float64)).sum(axis=1)


def compute_erf(
    model: Model | Callable[[Tensor], Tensor],
    n_samples: int,
    input_kind: str = "random_uniform",
    rng: Rng | None = None,
    input_size: int = 64,
    images: Sequence[np.ndarray] | None = None,
    batch_size: int = 16,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> ErfMap:
    """Average |d center(stage-4 features) / d input| over ``n_samples`` inputs.

    Sample i is always the i-th draw from ``rng`` (or the i-th image), and
    per-sample maps are summed in sample order.  Chunks are fixed by
    ``batch_size`` alone, so the worker count never changes a bit of the
    result; a different batch size may move the last ulp (BLAS blocking).  ``model`` may also be any feature map
    ``f(x) -> (B, C, h, w)``, evaluated in float64.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    check_input_extent(input_size, input_size)
    shape = (3, input_size, input_size)
    if input_kind == "random_uniform":
        rng = rng or Rng(0)
        samples = [rng.uniform(shape) for _ in range(n_samples)]
    elif input_kind == "image_dir":
        if not images:
            raise ValueError("image_dir ERF needs at least one image")
        samples = [np.asarray(im, dtype=np.float64).reshape(shape) for im in list(images)[:n_samples]]
    else:
        raise ValueError(f"unknown input kind {input_kind!r}")

    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    if isinstance(model, Model):
        features, dtype = (lambda x: features_forward(model, x)), model.dtype
    else:
        features, dtype = model, np.float64

    def run(chunk):
        return _erf_batch(features, np.stack(chunk).astype(dtype))

    acc = np.zeros((input_size, input_size), dtype=np.float64)
    done = 0
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run, chunks)
            for per_sample in results:
                for g in per_sample:
                    acc += g
                done += len(per_sample)
                if progress:
                    progress(done, len(samples))
    else:
        for chunk in chunks:
            for g in run(chunk):
                acc += g
            done += len(chunk)
            if progress:
                progress(done, len(samples))
    return ErfMap(acc / len(samples), len(samples), input_kind, (input_size // 2, input_size // 2))


# --------------------------------------------------------------------------
# Gaussian-ness of an ERF


@dataclass
class AgdMetrics:
    radial_profile: list[tuple[int, float]]
    monotonicity_violation: float
    gauss_sigma: float
    gauss_r2: float
    area_ratio: dict[float, float]
    argmax: tuple[int, int]


def radial_profile(grid: np.ndarray, center: tuple[int, int]) -> list[tuple[int, float]]:
    """Mean value over 1-pixel annuli (distance rounded to the nearest integer)."""
    yy, xx = np.indices(grid.shape)
    r = np.rint(np.hypot(yy - center[0], xx - center[1])).astype(int)
    sums = np.bincount(r.ravel(), weights=grid.ravel())
    counts = np.bincount(r.ravel())
    return [(int(k), float(sums[k] / counts[k])) for k in np.flatnonzero(counts)]


def fit_gaussian(profile: Sequence[tuple[int, float]], floor: float = 1e-3) -> tuple[float, float]:
    """Least-squares fit of ln(p) = a - r^2 / (2 sigma^2); returns (sigma, R^2).

    Only radii with p > floor * peak enter the fit.  R^2 is measured on ln(p)
    and clamped to [0, 1]; a flat or rising profile scores 0.
    """
    r = np.array([p[0] for p in profile], dtype=np.float64)
    v = np.array([p[1] for p in profile], dtype=np.float64)
    peak = v.max()
    keep = v > floor * peak
    if keep.sum() < 2:
        return 0.0, 0.0
    x, y = r[keep] ** 2, np.log(v[keep])
    slope, intercept = np.polyfit(x, y, 1)
    if slope >= 0:
        return math.inf, 0.0
    sigma = math.sqrt(-1.0 / (2.0 * slope))
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return sigma, 0.0
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    return sigma, min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def area_ratio(grid: np.ndarray, center: tuple[int, int], threshold: float) -> float:
    """Area fraction of the smallest centered square holding ``threshold`` of the mass."""
    total = grid.sum()
    H, W = grid.shape
    cy, cx = center
    for r in range(max(H, W)):
        win = grid[max(0, cy - r):cy + r + 1, max(0, cx - r):cx + r + 1]
        if win.sum() >= threshold * total * (1 - 1e-12):
            return win.size / grid.size
    return 1.0


def agd_metrics(e: ErfMap) -> AgdMetrics:
    grid = np.asarray(e.grid, dtype=np.float64)
    if not np.any(grid > 0):
        raise DegenerateInputError("ERF map has no positive mass")
    profile = radial_profile(grid, e.center)
    vals = np.array([p[1] for p in profile])
    peak = vals.max()
    jumps = np.diff(vals)
    violation = float(max(0.0, jumps.max()) / peak) if jumps.size else 0.0
    sigma, r2 = fit_gaussian(profile)
    areas = {t: area_ratio(grid, e.center, t) for t in AREA_THRESHOLDS}
    am = np.unravel_index(int(np.argmax(grid)), grid.shape)
    return AgdMetrics(profile, violation, sigma, r2, areas, (int(am[0]), int(am[1])))


def gaussian_map(size: int, sigma: float, center: tuple[int, int] | None = None) -> np.ndarray:
    """Synthetic isotropic Gaussian on a square grid."""
    cy, cx = center or (size // 2, size // 2)
    yy, xx = np.indices((size, size))
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))


def render_heatmap(e: ErfMap | np.ndarray, gamma: float = 0.5) -> np.ndarray:
    """8-bit grayscale rendering v -> round(255 * (v / max) ** gamma)."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    grid = np.asarray(e.grid if isinstance(e, ErfMap) else e, dtype=np.float64)
    top = grid.max()
    if not top > 0:
        raise DegenerateInputError("cannot render a map whose maximum is zero")
    return np.rint(255.0 * np.clip(grid / top, 0.0, 1.0) ** gamma).astype(np.uint8)
