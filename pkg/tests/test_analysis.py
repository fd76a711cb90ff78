import numpy as np
import pytest

from uniconvnet import analysis, ops
from uniconvnet.analysis import (
    DegenerateInputError,
    ErfMap,
    RfSupportError,
    agd_metrics,
    compute_erf,
    count_flops,
    count_params,
    empirical_rf_support,
    enumerate_params,
    gaussian_map,
    instrumented_macs,
    layer_costs,
    render_heatmap,
)
from uniconvnet.model import a_like_config, build_model, tiny_config
from uniconvnet.tensor import Rng, Tensor


@pytest.fixture(scope="module")
def tiny():
    return build_model(tiny_config(), Rng(0))


def test_closed_form_param_counts():
    dw = analysis._conv("rfa", 16, 16, 7, 16, 56, 56)
    pw = analysis._conv("rfa", 16, 32, 1, 1, 56, 56)
    assert dw.params == 16 * 49 + 16 == 800
    assert pw.params == 16 * 32 + 32 == 544
    assert dw.macs == 56 * 56 * 16 * 49 == 2_458_624
    assert pw.macs == 56 * 56 * 16 * 32 == 1_605_632


def test_instrumented_single_layers():
    x = Tensor(np.zeros((1, 16, 56, 56), np.float32))
    with ops.count_ops() as c:
        ops.conv2d(x, Tensor(np.zeros((16, 1, 7, 7), np.float32)), padding=3, groups=16)
    assert c.macs == 2_458_624
    with ops.count_ops() as c:
        ops.conv2d(x, Tensor(np.zeros((32, 16, 1, 1), np.float32)))
    assert c.macs == 1_605_632


def test_params_match_enumeration(tiny):
    bd = count_params(tiny)
    assert bd.params == enumerate_params(tiny).params == tiny.num_params()
    for cat in analysis.CATEGORIES:
        assert bd.categories[cat].params == enumerate_params(tiny).categories[cat].params


def test_macs_match_instrumented(tiny):
    bd = count_flops(tiny, (64, 64))
    counter = instrumented_macs(tiny, (64, 64))
    assert bd.macs == counter.macs
    assert bd.elementwise == counter.elementwise


def test_zero_depth_stage_contributes_nothing(tiny):
    cut = tiny_config(stage_depths=(1, 0, 2, 1))
    stage1 = sum(v.size for k, v in tiny.params.items() if k.startswith("stages.1."))
    assert count_params(tiny_config()).params - count_params(cut).params == stage1
    identity_blocks = count_flops(tiny_config(stage_depths=(0, 0, 0, 0)), (64, 64))
    assert identity_blocks.categories["rfa"] == analysis.Cost()
    assert identity_blocks.categories["ffn"] == analysis.Cost()


def test_totals_are_category_sums(tiny):
    bd = count_flops(tiny, (64, 64))
    assert bd.params == sum(c.params for c in bd.categories.values())
    assert bd.macs == sum(c.macs for c in bd.categories.values())
    assert [r[0] for r in bd.rows()] == [*analysis.CATEGORIES, "total"]


def test_a_like_envelope():
    bd = count_flops(a_like_config(), (224, 224))
    assert 3.0e6 <= bd.params <= 3.8e6
    assert 0.45e9 <= bd.macs <= 0.75e9


def test_support_touching_border_is_reported():
    w = Tensor(np.full((1, 1, 7, 7), 0.2))
    with pytest.raises(RfSupportError):
        empirical_rf_support(lambda x: ops.conv2d(x, w, padding=3), (1, 1, 7, 7), Rng(0))


def test_erf_identity_model_is_a_delta():
    e = compute_erf(lambda x: x, 2, rng=Rng(0), input_size=32)
    want = np.zeros((32, 32))
    want[16, 16] = 3.0  # summed over the three input channels
    np.testing.assert_array_equal(e.grid, want)
    assert e.center == (16, 16)


def test_erf_single_conv_plateau():
    w = Tensor(np.ones((3, 1, 3, 3)))
    e = compute_erf(lambda x: ops.conv2d(x, w, padding=1, groups=3), 3, rng=Rng(0), input_size=32)
    nz = np.argwhere(e.grid > 0)
    assert nz.min(axis=0).tolist() == [15, 15] and nz.max(axis=0).tolist() == [17, 17]
    np.testing.assert_array_equal(e.grid[15:18, 15:18], np.full((3, 3), 3.0))


def test_erf_prefix_determinism(tiny):
    one = compute_erf(tiny, 1, rng=Rng(9), input_size=32, batch_size=1)
    two = compute_erf(tiny, 2, rng=Rng(9), input_size=32, batch_size=1)
    draws = Rng(9)
    first, second = draws.uniform((3, 32, 32)), draws.uniform((3, 32, 32))
    alone = [compute_erf(tiny, 1, "image_dir", input_size=32, images=[im]).grid for im in (first, second)]
    assert one.grid.tobytes() == alone[0].tobytes()
    assert two.grid.tobytes() == ((alone[0] + alone[1]) / 2).tobytes()


def test_erf_independent_of_batching_and_workers(tiny):
    a = compute_erf(tiny, 5, rng=Rng(2), input_size=32, batch_size=2)
    b = compute_erf(tiny, 5, rng=Rng(2), input_size=32, batch_size=2, workers=3)
    assert a.grid.tobytes() == b.grid.tobytes()
    c = compute_erf(tiny, 5, rng=Rng(2), input_size=32, batch_size=5)
    np.testing.assert_allclose(c.grid, a.grid, rtol=1e-5)


def test_erf_input_channel_permutation(tiny):
    """Permuting image channels together with stem conv1's input channels leaves the ERF unchanged."""
    images = [Rng(s).uniform((1, 3, 32, 32)) for s in range(3)]
    perm = [2, 0, 1]
    p = dict(tiny.params)
    p["stem.conv1.weight"] = p["stem.conv1.weight"][:, perm]
    permuted = tiny.with_params(p)
    a = compute_erf(tiny, 3, "image_dir", input_size=32, images=images)
    b = compute_erf(permuted, 3, "image_dir", input_size=32, images=[im[:, perm] for im in images])
    np.testing.assert_allclose(a.grid, b.grid, rtol=1e-5, atol=1e-12)


def test_erf_grid_nonnegative(tiny):
    e = compute_erf(tiny, 2, rng=Rng(1), input_size=32)
    assert e.grid.shape == (32, 32) and (e.grid >= 0).all() and e.sample_count == 2


def test_erf_rejects_bad_requests(tiny):
    with pytest.raises(ValueError):
        compute_erf(tiny, 0)
    with pytest.raises(ValueError):
        compute_erf(tiny, 1, "image_dir", images=[])


def test_agd_recovers_gaussian():
    m = agd_metrics(ErfMap(gaussian_map(101, 10.0), 1, "random_uniform", (50, 50)))
    assert abs(m.gauss_sigma - 10.0) / 10.0 < 0.01
    assert m.gauss_r2 > 0.999
    assert m.argmax == (50, 50)
    assert m.monotonicity_violation == 0.0
    assert m.area_ratio[0.2] < m.area_ratio[0.5] < m.area_ratio[0.9] < 1.0


@pytest.mark.parametrize("sigma", [3.0, 6.5, 15.0])
def test_agd_sigma_sweep(sigma):
    m = agd_metrics(ErfMap(gaussian_map(129, sigma), 1, "random_uniform", (64, 64)))
    assert abs(m.gauss_sigma - sigma) / sigma < 0.01


def test_agd_delta_map():
    g = np.zeros((41, 41))
    g[20, 20] = 1.0
    m = agd_metrics(ErfMap(g, 1, "random_uniform", (20, 20)))
    assert m.area_ratio[0.9] == pytest.approx(1 / g.size)
    assert m.gauss_sigma < 1.0


def test_agd_uniform_map():
    m = agd_metrics(ErfMap(np.ones((33, 33)), 1, "random_uniform", (16, 16)))
    assert m.gauss_r2 < 1e-6
    assert m.monotonicity_violation < 1e-12


def test_agd_zero_map():
    with pytest.raises(DegenerateInputError):
        agd_metrics(ErfMap(np.zeros((8, 8)), 1, "random_uniform", (4, 4)))


def test_radial_profile_radii_increase():
    prof = analysis.radial_profile(Rng(0).uniform((20, 20)), (10, 10))
    radii = [r for r, _ in prof]
    assert radii == sorted(set(radii)) and radii[0] == 0


def test_render_heatmap():
    g = np.array([[0.0, 1.0], [4.0, 2.0]])
    img = render_heatmap(g)
    assert img.dtype == np.uint8
    assert img[1, 0] == 255 and img[0, 0] == 0
    ramp = np.arange(256, dtype=np.float64).reshape(16, 16)
    np.testing.assert_array_equal(render_heatmap(ramp, gamma=1.0), ramp.astype(np.uint8))
    with pytest.raises(DegenerateInputError):
        render_heatmap(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        render_heatmap(g, gamma=0.0)
