import itertools
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from di_retinex import retinex_stats as rs
from di_retinex.sensor_sim import SceneConfig, SceneSpec, make_scene, simulate_pairs

from _oracles import ssim_constant


# --- joint histogram -----------------------------------------------------------


def hist_loops(a, b, bins):
    out = np.zeros((bins, bins), int)
    for x, y in zip(a.ravel(), b.ravel()):
        i = min(int(x * bins), bins - 1)
        j = min(int(y * bins), bins - 1)
        out[i, j] += 1
    return out


def test_hist_total_and_oracle(rng):
    a, b = rng.random((7, 9, 3)), rng.random((7, 9, 3))
    a[0, 0, 0], b[1, 1, 1] = 1.0, 0.0
    h = rs.joint_histogram(a, b, bins=16)
    assert h.total == 7 * 9 * 3
    np.testing.assert_array_equal(h.counts, hist_loops(a, b, 16))


def test_hist_constant_images_single_bin():
    h = rs.joint_histogram(np.full((4, 4, 3), 0.3), np.full((4, 4, 3), 0.7), bins=10)
    assert np.count_nonzero(h.counts) == 1 and h.counts[3, 7] == 48


def test_hist_saturation_partition():
    a = np.array([[0.0, 0.5, 0.5, 0.2]])
    b = np.array([[0.5, 1.0, 0.6, 0.3]])
    h = rs.joint_histogram(a, b, bins=4)
    assert h.saturated.tolist() == [[True, True, False, False]]
    assert h.saturated_counts.sum() == 2


def test_hist_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        rs.joint_histogram(np.zeros((2, 2)), np.zeros((2, 3)))


# --- regression -----------------------------------------------------------------


def test_regression_exact_line(rng):
    x = rng.random((10, 10))
    r = rs.masked_linear_regression(x, 2 * x + 3)
    assert r.slope == pytest.approx(2, abs=1e-10) and r.intercept == pytest.approx(3, abs=1e-10)
    assert r.r2 == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_regression_recovers_linear_data(seed, m, c):
    r = np.random.default_rng(seed)
    x = r.random(50)
    rep = rs.masked_linear_regression(x, m * x + c)
    assert abs(rep.slope - m) < 1e-10 and abs(rep.intercept - c) < 1e-10


@given(st.integers(0, 10_000))
def test_regression_r2_in_unit_interval_and_counts(seed):
    r = np.random.default_rng(seed)
    x, y = r.random((6, 6)), r.random((6, 6))
    mask = r.random((6, 6)) > 0.3
    if mask.sum() < 3:
        return
    rep = rs.masked_linear_regression(x, y, mask)
    assert 0 <= rep.r2 <= 1
    assert rep.used + rep.masked_out == 36 and rep.used == mask.sum()


def test_regression_mask_excludes_outliers(rng):
    x = rng.random(100)
    y = 0.5 * x + 0.1
    y[:10] = 50.0
    mask = np.ones(100, bool)
    mask[:10] = False
    assert rs.masked_linear_regression(x, y, mask).slope == pytest.approx(0.5, abs=1e-12)


def test_regression_degenerate():
    with pytest.raises(rs.DegenerateRegression, match="constant"):
        rs.masked_linear_regression(np.full(10, 0.3), np.arange(10.0))
    with pytest.raises(rs.DegenerateRegression):
        rs.masked_linear_regression(np.arange(3.0), np.arange(3.0), [1, 0, 0])


def sim_pair(seed=0, **kw):
    cfg = SceneConfig(seed=seed, **kw)
    return next(simulate_pairs(cfg, 1))


def test_forward_slope_and_offset_on_simulated_pair():
    scene, low, high = sim_pair(seed=11)
    fwd = rs.regress_pair(low.image, high.image, "forward")
    alpha = scene.ratio.flat[0] ** scene.gamma
    assert abs(fwd.pooled.slope / alpha - 1) < 0.05
    assert abs(fwd.pooled.intercept) > 0.01
    assert len(fwd.per_channel) == 3


def test_reverse_offset_small():
    scene, low, high = sim_pair(seed=11)
    fwd = rs.regress_pair(low.image, high.image, "forward").pooled
    rev = rs.regress_pair(low.image, high.image, "reverse").pooled
    alpha_rev = scene.ratio.flat[0] ** (-scene.gamma)
    assert abs(rev.intercept) < abs(fwd.intercept) * alpha_rev


def test_slope_product_noiseless():
    cfg = SceneConfig(sigma_read=0, sigma_shot=0, bits=None, seed=2)
    for _, low, high in simulate_pairs(cfg, 3):
        f = rs.regress_pair(low.image, high.image, "forward").pooled.slope
        r = rs.regress_pair(low.image, high.image, "reverse").pooled.slope
        assert abs(f * r - 1) < 1e-6


def test_regression_rejects_bad_direction(rng):
    with pytest.raises(ValueError):
        rs.regress_pair(rng.random((4, 4, 3)), rng.random((4, 4, 3)), "sideways")


# --- moments ------------------------------------------------------------------


def test_moments_reduce_without_clipping_terms():
    m = rs.beta_moments_predict(alpha=2.0, mu=-0.05, q=1 / 255)
    assert m.mean == pytest.approx(-0.05 * (1 - 2.0), abs=1e-15)
    assert m.var == pytest.approx(5 * (1 / 255) ** 2 / 12, rel=1e-15)


def test_moments_reverse_swaps_roles():
    f = rs.beta_moments_predict(0.5, -0.05, 0.01, 1e-4, 2e-4, 0.01, 0.02, "forward")
    r = rs.beta_moments_predict(0.5, -0.05, 0.01, 2e-4, 1e-4, 0.02, 0.01, "reverse")
    assert f.mean == r.mean and f.var == r.var


@given(st.floats(1, 30), st.floats(-0.2, 0), st.floats(1e-4, 0.1), st.floats(0, 1e-2), st.floats(0, 1e-2),
       st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_moments_algebra_shuffled(alpha, mu, q, vl, vh, ml, mh):
    m = rs.beta_moments_predict(alpha, mu, q, vl, vh, ml, mh)
    mean_terms = [mu, -mu * alpha, mh, -alpha * ml]
    var_terms = [q * q / 12, alpha * alpha * q * q / 12, vh, alpha * alpha * vl]
    random.Random(int(alpha * 1e6)).shuffle(mean_terms)
    random.Random(int(q * 1e6)).shuffle(var_terms)
    assert m.mean == pytest.approx(sum(mean_terms), abs=1e-12)
    assert m.var == pytest.approx(sum(var_terms), abs=1e-12)
    assert m.var >= 0


def test_predicted_beta_variance_matches_simulation():
    cfg = SceneConfig(height=500, width=667, sigma_read=0, sigma_shot=0, ratio_range=(3.0, 3.0), seed=5)
    scene, low, high = sim_pair(**{k: v for k, v in cfg.to_dict().items()})
    alpha = 3.0**scene.gamma
    keep = (low.delta_overflow == 0) & (high.delta_overflow == 0)
    beta = (high.image - alpha * low.image)[keep]
    pred = rs.beta_moments_predict(alpha, scene.mu, scene.q)
    assert beta.size > 900_000
    assert abs(beta.var() / pred.var - 1) < 0.10


# --- ground-truth linear model -----------------------------------------------


def scene_for(seed=0, **kw):
    cfg = SceneConfig(height=32, width=32, seed=seed)
    sc = make_scene(cfg, np.random.default_rng(seed))
    for k, v in kw.items():
        setattr(sc, k, v)
    return sc


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_linear_model_exact_without_errors(direction):
    sc = scene_for(sigma_read=0.0, sigma_shot=0.0, bits=None)
    chk = rs.verify_linear_model(sc, direction, np.random.default_rng(0))
    assert chk.pixels > 0 and chk.max_residual < 1e-12


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_linear_model_with_quantization(direction):
    sc = scene_for(sigma_read=0.0, sigma_shot=0.0, bits=8)
    chk = rs.verify_linear_model(sc, direction, np.random.default_rng(0))
    assert chk.mean_residual <= sc.q


def test_linear_model_with_moderate_noise():
    sc = scene_for(sigma_read=0.0, sigma_shot=1e-4, bits=8)
    chk = rs.verify_linear_model(sc, "forward", np.random.default_rng(0))
    assert 0 < chk.mean_residual < 0.05  # signal spans most of [0, 1]


# --- metrics --------------------------------------------------------------------


def test_mse_psnr_examples(rng):
    x = rng.random((8, 8, 3)) * 0.8
    assert rs.metric_mse_psnr(x, x) == (0.0, 99.0)
    mse, psnr = rs.metric_mse_psnr(x, x + 0.1)
    assert mse == pytest.approx(0.01, rel=1e-12) and psnr == pytest.approx(20.0, abs=1e-9)


def test_mse_matches_naive(rng):
    x, y = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    acc = 0.0
    for a, b in zip(x.ravel(), y.ravel()):
        acc += (a - b) ** 2
    assert abs(rs.metric_mse_psnr(x, y)[0] - acc / x.size) < 1e-12


def test_psnr_decreases_with_offset():
    base = np.full((4, 4, 3), 0.25)
    vals = [rs.metric_mse_psnr(base, base + d)[1] for d in np.linspace(0.01, 0.5, 30)]
    assert all(a > b for a, b in itertools.pairwise(vals))


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        rs.metric_mse_psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ssim_identity_and_symmetry(rng):
    x, y = rng.random((16, 20, 3)), rng.random((16, 20, 3))
    assert rs.metric_ssim(x, x) == 1.0
    assert rs.metric_ssim(x, y) == rs.metric_ssim(y, x)


def test_ssim_constant_images():
    got = rs.metric_ssim(np.full((12, 12, 3), 0.2), np.full((12, 12, 3), 0.8))
    assert got == pytest.approx(ssim_constant(0.2, 0.8), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_scikit_image(seed):
    r = np.random.default_rng(seed)
    x = r.random((40, 33, 3))
    y = np.clip(x + 0.1 * r.standard_normal(x.shape), 0, 1)
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=2)
    assert rs.metric_ssim(x, y) == pytest.approx(ref, abs=1e-8)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="11x11"):
        rs.metric_ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))


def test_ssim_range(rng):
    x = rng.random((20, 20, 3))
    assert -1 <= rs.metric_ssim(x, 1 - x) <= 1
