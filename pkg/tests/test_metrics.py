"""Metric contracts: closed-form values, hand oracles, Monte-Carlo checks."""

import math

import numpy as np
import pytest

from inpaintguard.denoiser import LAYER_NAMES, AttentionTaps, Denoiser, LayerTaps, encode
from inpaintguard.diffusion import NoiseSchedule, forward_diffuse
from inpaintguard.errors import ConfigError, ContractError, DimensionError
from inpaintguard.masks import MaskSpec, all_keep_mask
from inpaintguard.metrics import (
    attention_block_output,
    attention_divergence,
    attention_pca_map,
    bilinear_resize,
    feature_pca_map,
    gaussian_purify,
    heatmap_to_pgm,
    hole_deviation,
    psnr,
)
from inpaintguard.tensor import Tensor

from conftest import toy_config

_FIELDS = ("self_q", "self_k", "self_v", "cross_q", "cross_k", "cross_v")


def taps_from(builder):
    """Four synthetic layers; builder(layer_idx, field) -> array."""
    layers = []
    for i, name in enumerate(LAYER_NAMES):
        vals = {f: Tensor(np.asarray(builder(i, f), dtype=np.float64)) for f in _FIELDS}
        layers.append(LayerTaps(name, (2, 2), 1, **vals))
    return AttentionTaps(layers)


def random_taps(rng, tokens=4, dim=4):
    return taps_from(lambda i, f: rng.normal(size=(tokens, dim)))


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        assert psnr(x, x) == math.inf

    def test_uniform_eta_diff_closed_form(self):
        # |diff| = 0.06 everywhere collapses to -20 log10(0.06)
        a = np.full((3, 10, 10), 0.5)
        b = a + 0.06
        want = -20.0 * math.log10(0.06)
        assert psnr(a, b) == pytest.approx(want, abs=1e-12)
        assert round(psnr(a, b), 2) == 24.44

    def test_mse_001_gives_20db(self):
        a = np.zeros((1, 5, 5))
        b = np.full((1, 5, 5), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_eta_bound_property(self):
        # any eta-bounded delta keeps psnr above -20 log10(eta)
        eta = 0.06
        floor = -20.0 * math.log10(eta)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.random((3, 8, 8)) * 0.8 + 0.1
            d = rng.uniform(-eta, eta, size=x.shape)
            assert psnr(x, np.clip(x + d, 0, 1)) >= floor

    def test_bound_tight_when_saturated(self):
        x = np.full((3, 4, 4), 0.5)
        assert psnr(x, x + 0.06) == pytest.approx(-20.0 * math.log10(0.06))

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_rejections(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))
        with pytest.raises(ContractError):
            psnr(np.full((1, 2, 2), 1.5), np.zeros((1, 2, 2)))


class TestHoleDeviation:
    def test_identical_zero(self):
        x = np.random.default_rng(0).random((3, 6, 6))
        m = MaskSpec((np.arange(36).reshape(6, 6) % 3 == 0).astype(int))
        assert hole_deviation(x, x, m) == 0.0

    def test_empty_hole_zero_by_convention(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        assert hole_deviation(a, b, all_keep_mask((4, 4))) == 0.0

    def test_four_pixel_hand_example(self):
        a = np.zeros((2, 2))
        b = np.array([[0.1, 0.0], [0.0, 0.0]])
        m = MaskSpec(np.zeros((2, 2), dtype=int))  # every pixel is hole
        assert hole_deviation(a, b, m) == pytest.approx(0.0025, abs=1e-15)

    def test_channels_average_like_pixels(self):
        a = np.zeros((3, 2, 2))
        b = np.zeros((3, 2, 2))
        b[:, 0, 0] = 0.1  # same diff on all three channels of one pixel
        m = MaskSpec(np.zeros((2, 2), dtype=int))
        assert hole_deviation(a, b, m) == pytest.approx(0.0025, abs=1e-15)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.random((3, 5, 5))
            b = rng.random((3, 5, 5))
            grid = (rng.random((5, 5)) < 0.6).astype(int)
            if (grid == 0).sum() == 0:
                grid[2, 2] = 0
            total, n = 0.0, 0
            for c in range(3):
                for y in range(5):
                    for x in range(5):
                        if grid[y, x] == 0:
                            total += (a[c, y, x] - b[c, y, x]) ** 2
                            n += 1
            want = total / n
            got = hole_deviation(a, b, MaskSpec(grid))
            assert got == pytest.approx(want, rel=1e-13)

    def test_ignores_keep_pixels(self):
        a = np.zeros((1, 3, 3))
        b = np.zeros((1, 3, 3))
        b[0, 0, 0] = 0.7  # keep pixel, must not count
        grid = np.ones((3, 3), dtype=int)
        grid[2, 2] = 0
        assert hole_deviation(a, b, MaskSpec(grid)) == 0.0

    def test_rejections(self):
        m = all_keep_mask((4, 4))
        with pytest.raises(DimensionError):
            hole_deviation(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), m)
        with pytest.raises(DimensionError):
            hole_deviation(np.zeros((3, 5, 5)), np.zeros((3, 5, 5)), m)
        with pytest.raises(ContractError):
            hole_deviation(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.ones((4, 4)))


def one_hot_qk(shift):
    """Taps whose attention rows saturate to one-hot at token (i + shift) % 4."""
    beta = 600.0
    ident = np.eye(4)

    def build(i, f):
        if f.endswith("_q"):
            return beta * ident
        if f.endswith("_k"):
            return np.roll(ident, -shift, axis=0)
        return ident  # values, unused by the divergence

    return taps_from(build)


class TestAttentionDivergence:
    def test_identical_taps_zero_exact(self):
        taps = random_taps(np.random.default_rng(0))
        clone = taps_from(lambda i, f: getattr(taps.layers[i], f).data.copy())
        assert attention_divergence(taps, clone) == 0.0

    def test_orthogonal_one_hot_rows_give_one(self):
        # saturated logits make every row one-hot; shifting the key
        # identity moves the hot entry so matched rows are orthogonal
        a, b = one_hot_qk(0), one_hot_qk(1)
        assert attention_divergence(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry_bitwise(self):
        rng = np.random.default_rng(1)
        a, b = random_taps(rng), random_taps(rng)
        assert attention_divergence(a, b) == attention_divergence(b, a)

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            v = attention_divergence(random_taps(rng), random_taps(rng))
            assert 0.0 <= v <= 2.0

    def test_row_shift_invariance_of_maps(self):
        # adding one constant vector to every key shifts each row's
        # logits uniformly, so the maps and the divergence stay ~0
        rng = np.random.default_rng(3)
        a = random_taps(rng)

        def shifted(i, f):
            base = getattr(a.layers[i], f).data.copy()
            return base + 0.8 if f.endswith("_k") else base

        assert attention_divergence(a, taps_from(shifted)) <= 1e-12

    def test_positive_when_maps_differ(self):
        rng = np.random.default_rng(4)
        a = random_taps(rng)
        b = taps_from(
            lambda i, f: getattr(a.layers[i], f).data + (0.3 if f == "self_q" else 0.0)
        )
        assert attention_divergence(a, b) > 0.0

    def test_shape_mismatch(self):
        a = random_taps(np.random.default_rng(5))
        b = random_taps(np.random.default_rng(5), tokens=9)
        with pytest.raises(DimensionError):
            attention_divergence(a, b)

    def test_multi_head_taps_from_model(self):
        model = Denoiser.fresh(toy_config(), seed=11, zero_head=False)
        model.set_trainable(False)
        sched = NoiseSchedule()
        rng = np.random.default_rng(6)
        x = Tensor(rng.random((1, 3, 8, 8)))
        y = Tensor(rng.random((1, 3, 8, 8)))
        eps = rng.standard_normal((1, 4, 4, 4))
        tok = np.array([[1, 2, 3, 0]])
        m = Tensor(np.ones((1, 1, 4, 4)))

        def taps_of(img):
            z = encode(img, model.config)
            z_t = forward_diffuse(z, sched.t_train, eps, sched)
            _, taps = model.predict(z_t, encode(img, model.config), m,
                                    sched.t_train, tok, want_taps=True)
            return taps

        ta, tb = taps_of(x), taps_of(y)
        assert attention_divergence(ta, ta) == 0.0
        assert 0.0 < attention_divergence(ta, tb) <= 2.0


class TestBlockOutput:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        taps = random_taps(rng, tokens=4, dim=4)
        for branch in ("self", "cross"):
            lt = taps.layers[2]
            q = (lt.cross_q if branch == "cross" else lt.self_q).data
            k = (lt.cross_k if branch == "cross" else lt.self_k).data
            v = (lt.cross_v if branch == "cross" else lt.self_v).data
            # single head: plain softmax(q k^T / sqrt(d)) @ v
            logits = q @ k.T / math.sqrt(q.shape[1])
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            maps = e / e.sum(axis=1, keepdims=True)
            want = maps @ v
            got = attention_block_output(taps, 3, branch)
            assert np.allclose(got, want, atol=1e-13)

    def test_head_merge_layout(self):
        # two heads: each output half comes from its own head's map
        q = np.zeros((2, 4))
        q[:, :2] = 600.0 * np.eye(2)  # head 0 saturates to one-hot rows
        k = np.zeros((2, 4))
        k[:, :2] = np.eye(2)
        v = np.arange(8.0).reshape(2, 4)
        layers = [
            LayerTaps(n, (1, 2), 2, *(Tensor(a.copy()) for a in (q, k, v) * 2))
            for n in LAYER_NAMES
        ]
        out = attention_block_output(AttentionTaps(layers), 1, "self")
        # head 0 one-hot at the own token: first half equals v's first half
        assert np.allclose(out[:, :2], v[:, :2], atol=1e-12)


class TestBilinearResize:
    def test_identity_same_size(self):
        g = np.random.default_rng(0).random((16, 16))
        assert np.array_equal(bilinear_resize(g, (16, 16)), g)

    def test_2x2_to_3x3_hand_values(self):
        g = np.array([[0.0, 1.0], [2.0, 4.0]])
        out = bilinear_resize(g, (3, 3))
        want = np.array([[0.0, 0.5, 1.0], [1.0, 1.75, 2.5], [2.0, 3.0, 4.0]])
        assert np.allclose(out, want, atol=1e-15)

    def test_constant_stays_constant(self):
        out = bilinear_resize(np.full((4, 4), 0.3), (16, 16))
        assert np.allclose(out, 0.3, atol=1e-15)

    def test_corners_preserved(self):
        g = np.random.default_rng(1).random((5, 7))
        out = bilinear_resize(g, (16, 16))
        assert out[0, 0] == g[0, 0] and out[-1, -1] == g[-1, -1]
        assert out[0, -1] == g[0, -1] and out[-1, 0] == g[-1, 0]


class TestPcaMap:
    def test_rank_one_recovers_generating_vector(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=16)
        u[3] = 3.0  # largest-magnitude centered entry is positive
        w = rng.normal(size=6)
        heat, degenerate = feature_pca_map(np.outer(u, w), (4, 4))
        want = bilinear_resize(u.reshape(4, 4), (16, 16))
        want = (want - want.min()) / (want.max() - want.min())
        assert not degenerate
        assert np.allclose(heat, want, atol=1e-10)

    def test_sign_fix_orients_mirrored_features(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(16, 5))
        h1, _ = feature_pca_map(a, (4, 4))
        h2, _ = feature_pca_map(-a, (4, 4))
        assert np.allclose(h1, h2, atol=1e-10)

    def test_constant_features_flat_map(self):
        heat, degenerate = feature_pca_map(np.full((16, 5), 1.3), (4, 4))
        assert degenerate
        assert np.all(heat == 0.5)
        assert heat.shape == (16, 16)

    def test_range_exact_unit_interval(self):
        heat, degenerate = feature_pca_map(
            np.random.default_rng(2).normal(size=(16, 5)), (4, 4)
        )
        assert not degenerate
        assert heat.min() == 0.0 and heat.max() == 1.0

    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(3)
        # strong spectral gap so 100 power iterations fully converge
        a = 3.0 * np.outer(rng.normal(size=16), rng.normal(size=6))
        a += 0.2 * np.outer(rng.normal(size=16), rng.normal(size=6))
        heat, _ = feature_pca_map(a, (4, 4))
        centered = a - a.mean(axis=0)
        _, _, vt = np.linalg.svd(centered)
        scores = centered @ vt[0]
        if scores[np.argmax(np.abs(scores))] < 0:
            scores = -scores
        want = bilinear_resize(scores.reshape(4, 4), (16, 16))
        want = (want - want.min()) / (want.max() - want.min())
        assert np.allclose(heat, want, atol=1e-9)

    def test_deterministic(self):
        a = np.random.default_rng(4).normal(size=(16, 5))
        h1, _ = feature_pca_map(a, (4, 4), seed=9)
        h2, _ = feature_pca_map(a, (4, 4), seed=9)
        assert np.array_equal(h1, h2)

    def test_token_grid_mismatch(self):
        with pytest.raises(DimensionError):
            feature_pca_map(np.zeros((10, 4)), (4, 4))

    def test_model_taps_end_to_end(self):
        model = Denoiser.fresh(toy_config(), seed=11, zero_head=False)
        model.set_trainable(False)
        rng = np.random.default_rng(5)
        z = Tensor(rng.standard_normal((1, 4, 4, 4)))
        tok = np.array([[1, 2, 3, 0]])
        m = Tensor(np.ones((1, 1, 4, 4)))
        _, taps = model.predict(z, z, m, 500, tok, want_taps=True)
        for layer in (1, "down2", 4):
            for branch in ("self", "cross"):
                heat, degenerate = attention_pca_map(taps, layer, branch)
                assert heat.shape == (16, 16)
                assert not degenerate
                assert heat.min() >= 0.0 and heat.max() <= 1.0
        by_name, _ = attention_pca_map(taps, "up1", "self")
        by_index, _ = attention_pca_map(taps, 4, "self")
        assert np.array_equal(by_name, by_index)

    def test_bad_layer_and_branch(self):
        taps = random_taps(np.random.default_rng(6))
        with pytest.raises(ConfigError):
            attention_pca_map(taps, 0, "self")
        with pytest.raises(ConfigError):
            attention_pca_map(taps, "mid", "self")
        with pytest.raises(ConfigError):
            attention_pca_map(taps, 1, "temporal")


class TestHeatmapPgm:
    def test_encoding(self):
        heat = np.zeros((16, 16))
        heat[0, 1] = 1.0
        buf = heatmap_to_pgm(heat)
        assert buf.startswith(b"P5\n16 16\n255\n")
        pixels = np.frombuffer(buf[len(b"P5\n16 16\n255\n"):], dtype=np.uint8)
        assert pixels[1] == 255 and pixels[0] == 0
        assert pixels.size == 256

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            heatmap_to_pgm(np.full((4, 4), 1.2))


class TestGaussianPurify:
    def test_sigma_zero_identity(self):
        x = np.random.default_rng(0).random((3, 8, 8))
        assert np.array_equal(gaussian_purify(x, 0.0, seed=3), x)

    def test_output_range(self):
        x = np.random.default_rng(1).random((3, 16, 16))
        out = gaussian_purify(x, 0.5, seed=4)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_noise_std_monte_carlo(self):
        # center at 0.5 so sigma = 0.05 never clips (10 sigma margin)
        sigma = 0.05
        x = np.full((3, 200, 200), 0.5)
        out = gaussian_purify(x, sigma, seed=5)
        added = out - x
        assert added.size >= 10**5
        assert abs(added.std() - sigma) <= 0.02 * sigma

    def test_deterministic_and_seed_sensitive(self):
        x = np.full((3, 8, 8), 0.4)
        a = gaussian_purify(x, 0.1, seed=7)
        b = gaussian_purify(x, 0.1, seed=7)
        c = gaussian_purify(x, 0.1, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigError):
            gaussian_purify(np.zeros((1, 2, 2)), -0.1)
