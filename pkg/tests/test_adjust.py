import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from di_retinex import adjust as adj
from di_retinex import diffgraph as dg
from di_retinex.adjust import EnhancerConfig
from di_retinex.diffgraph import ShapeError, Tensor

from _oracles import TAN_0_2_DEG, TAN_89_8_DEG, THREE_LN2

unit = st.floats(-1, 1, allow_nan=False)


# --- mappings ---------------------------------------------------------------


def test_g_identity_point_exact():
    assert adj.map_g(0.0, 0.2) == 1.0


def test_g_endpoints_match_high_precision():
    assert adj.map_g(1.0, 0.2) == pytest.approx(TAN_89_8_DEG, rel=1e-12)
    assert adj.map_g(-1.0, 0.2) == pytest.approx(TAN_0_2_DEG, rel=1e-12)


@given(unit)
def test_g_matches_direct_tangent(c):
    direct = math.tan((45 + (45 - 0.2) * c) / 180 * math.pi)
    assert adj.map_g(c, 0.2) == pytest.approx(direct, rel=1e-9)


def test_g_rejects_out_of_range():
    with pytest.raises(ValueError):
        adj.map_g(np.array([0.5, 1.01]), 0.2)
    with pytest.raises(ValueError):
        adj.map_g(0.0, 45.0)


def test_alt_mapping_examples():
    assert adj.map_alt(0.0, "g1") == pytest.approx(1 / (1 + 1e-8), rel=1e-15)
    assert adj.map_alt(-1.0, "g2") == pytest.approx(1.5 * math.log(2 / (2 + 1e-8)), abs=1e-15)
    assert abs(adj.map_alt(-1.0, "g2")) < 1e-8
    assert adj.map_alt(0.0, "g3") == pytest.approx(THREE_LN2, rel=1e-14)


def test_alt_mapping_rejects_unknown():
    with pytest.raises(ValueError):
        adj.map_alt(0.0, "g7")


@pytest.mark.parametrize("mapping", ["g", "g1", "g2", "g3"])
@given(st.lists(st.floats(-1, 0.999), min_size=2, max_size=20, unique=True))
def test_mappings_strictly_increasing(mapping, cs):
    c = np.sort(np.array(cs))
    c = c[np.diff(c, prepend=-2) > 1e-9]
    a = adj.contrast_map(c, mapping, 0.2)
    assert np.all(np.diff(a) > 0) and np.all(a > -1e-8) and np.all(np.isfinite(a))  # g2(-1) = -7.5e-9 by its guard


# --- apply_adjustment ---------------------------------------------------------


def test_adjust_identity_bit_exact(rng):
    img = rng.random((5, 5, 3))
    np.testing.assert_array_equal(adj.apply_adjustment(img, np.ones((5, 5, 3)), np.zeros((5, 5, 3))), img)


def test_adjust_brightness_only():
    assert adj.apply_adjustment(np.array(0.3), 1.0, 0.2) == pytest.approx(0.5, abs=1e-15)


def test_adjust_midpoint_fixed_point():
    assert adj.apply_adjustment(np.array(0.5), 2.0, 0.0) == 0.5


@given(st.floats(1e-3, 300), st.floats(0.1, 2.0))
def test_midpoint_fixed_for_any_contrast(a, k):
    assert adj.apply_adjustment(np.array(k / 2), a, 0.0, k) == k / 2


def test_adjust_hand_example():
    assert adj.apply_adjustment(np.array(0.25), 2.0, 0.5) == pytest.approx(0.75, abs=1e-15)


@given(st.integers(0, 10_000))
def test_adjust_two_forms_agree(seed):
    r = np.random.default_rng(seed)
    img, a, b = r.random((4, 4, 3)), r.uniform(0.01, 10, (4, 4, 3)), r.uniform(-1, 1, (4, 4, 3))
    centred = a * (img - 0.5 * (1 - b)) + 0.5 * (1 + b)
    np.testing.assert_allclose(adj.apply_adjustment(img, a, b), centred, rtol=0, atol=1e-12)
    np.testing.assert_allclose(adj.apply_adjustment(img, np.ones_like(a), b) - img, b, rtol=0, atol=1e-15)


def test_adjust_broadcast_single_channel(rng):
    img = rng.random((3, 4, 3))
    a, b = np.full((3, 4, 1), 2.0), np.full((3, 4, 1), 0.1)
    out = adj.apply_adjustment(img, a, b)
    np.testing.assert_allclose(out, 2 * img + 0.5 * (0.2 - 2 + 0.1 + 1), atol=1e-15)


def test_adjust_rejects_mismatch(rng):
    with pytest.raises(ShapeError):
        adj.apply_adjustment(rng.random((3, 4, 3)), np.ones((3, 5, 3)), np.zeros((3, 5, 3)))
    with pytest.raises(ShapeError):
        adj.apply_adjustment(rng.random((3, 4, 1)), np.ones((3, 4, 3)), np.zeros((3, 4, 3)))


# --- reduce_to_scalar --------------------------------------------------------


def test_reduce_constant_and_binary():
    assert adj.reduce_to_scalar(np.full((3, 3, 1), 0.7)).item() == pytest.approx(0.7, abs=1e-15)
    m = np.zeros((2, 2, 1))
    m[0] = 1
    assert adj.reduce_to_scalar(m).item() == 0.5


def test_reduce_matches_naive_sum(rng):
    m = rng.random((5, 6, 3))
    acc = 0.0
    for v in m.ravel():
        acc += v
    assert abs(adj.reduce_to_scalar(m).item() - acc / m.size) < 1e-12


def test_reduce_rejects_empty():
    with pytest.raises(ShapeError):
        adj.reduce_to_scalar(np.zeros((0, 3, 1)))


# --- network ---------------------------------------------------------------


@pytest.mark.parametrize("cfg", [EnhancerConfig(), EnhancerConfig.small()])
def test_init_gives_identity(cfg, rng):
    params = adj.init_params(cfg, rng)
    img = rng.random((9, 7, 3))
    maps = adj.net_forward(img, params, cfg)
    assert not maps.b.data.any() and not maps.c.data.any()
    assert np.all(maps.a.data == 1.0)
    np.testing.assert_array_equal(adj.enhance(img, params, cfg), img)


@pytest.mark.parametrize("cfg,half", [(EnhancerConfig(), 3), (EnhancerConfig.small(), 1)])
def test_coeff_shapes_and_range(cfg, half, rng):
    params = adj.init_params(cfg, rng, zero_final=False)
    m = adj.net_forward(rng.random((6, 5, 3)), params, cfg)
    assert m.b.shape == m.c.shape == m.a.shape == (6, 5, half)
    assert np.all(np.abs(m.b.data) <= 1) and np.all(np.abs(m.c.data) <= 1) and np.all(m.a.data > 0)
    np.testing.assert_allclose(m.a.data, adj.map_g(m.c.data, cfg.tau), rtol=1e-15)


def test_channel_split_convention(rng):
    cfg = EnhancerConfig.small()
    params = adj.init_params(cfg, rng)
    params.biases[-1].data[:] = [0.3, -0.2]  # final layer zero: output = tanh(bias)
    m = adj.net_forward(rng.random((4, 4, 3)), params, cfg)
    np.testing.assert_allclose(m.b.data, np.tanh(0.3))
    np.testing.assert_allclose(m.c.data, np.tanh(-0.2))


def test_net_forward_deterministic(rng):
    cfg = EnhancerConfig()
    p1 = adj.init_params(cfg, np.random.default_rng(4), zero_final=False)
    p2 = adj.init_params(cfg, np.random.default_rng(4), zero_final=False)
    img = rng.random((8, 8, 3))
    a, b = adj.net_forward(img, p1, cfg).numpy(), adj.net_forward(img, p2, cfg).numpy()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


@pytest.mark.parametrize("cfg", [EnhancerConfig(c_int=8), EnhancerConfig.small(),
                                 EnhancerConfig.small(use_offset=False), EnhancerConfig.small(mapping="g2")])
@pytest.mark.parametrize("clamp", [False, True])
def test_inference_path_matches_graph(cfg, clamp, rng):
    params = adj.init_params(cfg, rng, zero_final=False)
    for w in params.weights:
        w.data *= 3.0  # push values through the clamp and tanh tails
    img = rng.random((13, 11, 3))
    fast = adj.enhance(img, params, cfg, clamp_output=clamp)
    with dg.Tape():
        ref = adj.enhance(img, params, cfg, clamp_output=clamp)
    np.testing.assert_allclose(fast, ref, rtol=1e-12, atol=1e-12)


def test_inference_path_propagates_nan(rng):
    cfg = EnhancerConfig.small()
    params = adj.init_params(cfg, rng, zero_final=False)
    params.weights[0].data[0, 0, 1, 1] = np.nan
    assert np.isnan(adj.enhance(rng.random((5, 5, 3)), params, cfg)).any()


def test_enhance_clamp(rng):
    cfg = EnhancerConfig.small()
    params = adj.init_params(cfg, rng)
    params.biases[-1].data[:] = [2.0, 2.0]
    img = rng.random((6, 6, 3))
    raw = adj.enhance(img, params, cfg)
    out = adj.enhance(img, params, cfg, clamp_output=True)
    assert raw.max() > 1 and out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.full((4, 4, 3), 1.5), np.zeros((4, 4, 4))])
def test_enhance_rejects_bad_image(bad, rng):
    cfg = EnhancerConfig.small()
    with pytest.raises(ValueError):
        adj.enhance(bad, adj.init_params(cfg, rng), cfg)


def test_scalar_and_offset_switches(rng):
    cfg = EnhancerConfig.small(scalar_b=True, scalar_c=True)
    params = adj.init_params(cfg, rng, zero_final=False)
    m = adj.net_forward(rng.random((5, 5, 3)), params, cfg)
    assert m.b.shape == (1, 1, 1) and m.c.shape == (1, 1, 1)
    off = EnhancerConfig.small(use_offset=False)
    m2 = adj.net_forward(rng.random((5, 5, 3)), params, off)
    assert not m2.b.data.any()


@pytest.mark.parametrize("kw", [{"c_out": 4}, {"c_int": 0}, {"tau": 0.0}, {"mapping": "h"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EnhancerConfig(**kw)


def test_layer_shapes():
    assert EnhancerConfig().layer_shapes() == [((64, 3, 3, 3), (64,)), ((64, 64, 3, 3), (64,)),
                                               ((6, 64, 3, 3), (6,))]
    assert EnhancerConfig.small().layer_shapes()[-1] == ((2, 4, 3, 3), (2,))


def test_tensor_in_tensor_out(rng):
    c = Tensor(rng.uniform(-1, 1, 5))
    assert isinstance(adj.map_g(c), Tensor)
    assert isinstance(adj.map_g(c.data), np.ndarray)


@given(st.lists(unit, min_size=1, max_size=20))
def test_g_array_branch_matches_graph_branch(vals):
    c = np.array(vals)
    np.testing.assert_array_equal(adj.map_g(c), adj.map_g(Tensor(c)).data)
