"""Verification suites shared by the CLI and the acceptance tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .analysis import SupportBox, empirical_rf_support
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, basic_block_forward, build_model, model_forward, tiny_config
from .rfa import RfaConfig, init_rfa_params, layer_operator_forward, rfa_forward, theoretical_rf
from .tensor import Rng, Tensor, concat_channels, split_channels

OP_TOL = 1e-5
COMPOSITE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    report: GradCheckReport


def _named(fn: Callable, names: list[str]):
    """Adapt ``fn(x, params)`` to the positional signature grad_check expects."""
    def call(x, *ps):
        return fn(x, dict(zip(names, ps)))
    return call


def _unit_gain_params(params: dict, rng: Rng) -> dict:
    # Unit-gain weights keep activations and gradients O(1).  At std 0.5 the
    # outputs reach ~1e3 and at the 0.02 init (with 1e-6 layer scales hiding
    # the residual branches) gradients sink to ~1e-11; either way the fixed
    # 1e-4 central difference resolves only noise.
    out = {}
    for k, v in params.items():
        leaf = k.rsplit(".", 1)[-1]
        if v.ndim == 4:
            out[k] = rng.normal(v.shape) / np.sqrt(v.shape[1] * v.shape[2] * v.shape[3])
        elif leaf == "gamma":
            out[k] = 1.0 + 0.1 * rng.normal(v.shape)
        elif leaf.startswith("scale"):
            out[k] = rng.uniform(v.shape, 0.5, 1.5)
        else:
            out[k] = 0.1 * rng.normal(v.shape)
    return out


def op_cases(rng: Rng) -> list[tuple[str, Callable, list, dict]]:
    """(name, op, input shapes, grad_check kwargs) for every primitive operator."""
    return [
        ("conv2d_depthwise_7x7", lambda x, w, b: ops.conv2d(x, w, b, padding=3, groups=4),
         [(2, 4, 9, 9), (4, 1, 7, 7), (4,)], {}),
        ("conv2d_dense_3x3_s2", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
         [(2, 3, 8, 8), (4, 3, 3, 3), (4,)], {}),
        ("conv2d_pointwise", lambda x, w, b: ops.conv2d(x, w, b), [(2, 4, 5, 5), (6, 4, 1, 1), (6,)], {}),
        ("gelu", ops.gelu, [(2, 3, 5, 5)], {"avoid_kink": True}),
        ("layer_norm_channels", ops.layer_norm_channels, [(2, 6, 4, 4), (6,), (6,)], {}),
        ("elementwise_mul", ops.elementwise_mul, [(2, 3, 4, 4), (2, 3, 4, 4)], {}),
        ("add", ops.add, [(2, 3, 4, 4), (2, 3, 4, 4)], {}),
        ("scale_channels", ops.scale_channels, [(2, 5, 4, 4), (5,)], {}),
        ("global_avg_pool", ops.global_avg_pool, [(2, 5, 4, 4)], {}),
        ("linear", ops.linear, [(3, 6, 1, 1), (4, 6), (4,)], {}),
        ("split_concat", lambda x: concat_channels(split_channels(x, [1, 3, 2])[::-1]), [(2, 6, 3, 3)], {}),
        ("softmax_cross_entropy",
         lambda z: ops.softmax_cross_entropy(ops.flatten_logits(z), [1, 0, 3]), [(3, 5, 1, 1)], {}),
    ]


def grad_check_suite(rng: Rng | None = None, model_cfg: ModelConfig | None = None,
                     model_size: int = 64, max_entries: int = 24) -> list[GradCase]:
    """Every operator at 1e-5, one LO / RFA / block at 1e-4, a full model at 1e-3."""
    rng = rng or Rng(0)
    cases = []
    for name, fn, shapes, kw in op_cases(rng):
        cases.append(GradCase(name, grad_check(fn, shapes, rng, tol=OP_TOL, **kw)))

    rcfg = RfaConfig(layer_count=3, channels=8)
    p = init_rfa_params(rcfg, rng, dtype=np.float64)
    p = _unit_gain_params(p, rng)
    names = list(p)

    def lo(x, P):
        A, H = split_channels(x, [4, 2])
        return layer_operator_forward(A, H, P, 2, rcfg)

    x = rng.normal((1, 6, 9, 9))
    cases.append(GradCase("layer_operator", grad_check(
        _named(lo, names), [], rng, tol=COMPOSITE_TOL, inputs=[x, *p.values()], max_entries=max_entries)))

    x = rng.normal((1, 8, 31, 31))
    cases.append(GradCase("rfa", grad_check(
        _named(lambda x, P: rfa_forward(x, P, rcfg), names), [], rng, tol=COMPOSITE_TOL,
        inputs=[x, *p.values()], max_entries=max_entries)))

    block_model = build_model(tiny_config(stage_channels=(8, 16, 24, 32)), rng, dtype=np.float64)
    bp = {k: v for k, v in block_model.params.items() if k.startswith("stages.0.blocks.0.")}
    bp = _unit_gain_params(bp, rng)
    bcfg = block_model.config.rfa_for(0)
    x = rng.normal((1, 8, 16, 16))
    cases.append(GradCase("basic_block", grad_check(
        _named(lambda x, P: basic_block_forward(x, P, "stages.0.blocks.0", bcfg), list(bp)), [], rng,
        tol=COMPOSITE_TOL, inputs=[x, *bp.values()], max_entries=max_entries)))

    model = build_model(model_cfg or tiny_config(), rng, dtype=np.float64)
    model = model.with_params(_unit_gain_params(model.params, rng))
    mp = model.params
    x = rng.uniform((1, 3, model_size, model_size))
    cases.append(GradCase("full_model", grad_check(
        _named(lambda x, P: model_forward(model, x, P), list(mp)), [], rng, tol=MODEL_TOL,
        inputs=[x, *mp.values()], max_entries=max(2, max_entries // 8))))
    return cases


@dataclass
class SupportCheck:
    name: str
    theoretical: int
    box: SupportBox

    @property
    def passed(self) -> bool:
        return self.box.size == (self.theoretical, self.theoretical)


def rfa_support_checks(template: RfaConfig, rng: Rng | None = None, stacked: bool = True) -> list[SupportCheck]:
    """Empirical gradient-support boxes of one (and two stacked) RFAs versus theory."""
    rng = rng or Rng(0)
    N = template.layer_count
    cfg = template.with_channels(2 * (N + 1))
    c = cfg.head_channels
    theory = theoretical_rf(cfg)
    amp_rf, dis_rf = theory.amp_chain_rf, theory.dis_rf_per_layer[-1]
    P = {k: Tensor(v) for k, v in init_rfa_params(cfg, rng, prefix="r0", dtype=np.float64, init="generic").items()}
    size = amp_rf + 6
    groups = {"amp": (0, N * c), "dis": (N * c, cfg.channels)}
    boxes = empirical_rf_support(lambda x: rfa_forward(x, P, cfg, prefix="r0"),
                                 (1, cfg.channels, size, size), rng, groups)
    checks = [SupportCheck("rfa_amp", amp_rf, boxes["amp"]), SupportCheck("rfa_dis", dis_rf, boxes["dis"])]
    if stacked:
        P.update({k: Tensor(v) for k, v in
                  init_rfa_params(cfg, rng, prefix="r1", dtype=np.float64, init="generic").items()})
        two = 2 * (amp_rf - 1) + 1
        size = two + 14
        boxes = empirical_rf_support(
            lambda x: rfa_forward(rfa_forward(x, P, cfg, prefix="r0"), P, cfg, prefix="r1"),
            (1, cfg.channels, size, size), rng, {"amp": (0, N * c)})
        checks.append(SupportCheck("stacked_rfa_amp", two, boxes["amp"]))
    return checks

