import numpy as np
import pytest

from fediac.compression import (
    compress,
    make_quant_config,
    quantize,
    quantize_value,
    residual_update,
    safe_vote,
    vote,
    vote_many,
)


class TestQuantConfig:
    def test_scale_formula(self):
        cfg = make_quant_config(12, 20, 0.5)
        assert cfg.scale == pytest.approx((2**11 - 20) / (20 * 0.5))
        assert cfg.limit == 2048

    @pytest.mark.parametrize("bits, n", [(5, 16), (5, 17), (2, 2)])
    def test_no_headroom_rejected(self, bits, n):
        with pytest.raises(ValueError, match="must exceed n_clients"):
            make_quant_config(bits, n, 1.0)

    @pytest.mark.parametrize("m", [0.0, -1.0, np.inf, np.nan, 2e-313])
    def test_bad_max_abs_rejected(self, m):
        with pytest.raises(ValueError):
            make_quant_config(8, 4, m)

    def test_sum_of_clients_fits_the_width(self, rng):
        n, bits = 8, 6
        u = rng.uniform(-1, 1, (n, 200))
        u[0, 0] = 1.0
        cfg = make_quant_config(bits, n, np.abs(u).max())
        q = quantize(cfg.scale * u, rng)
        total = q.sum(axis=0)
        assert np.all(np.abs(total) < cfg.limit)


class TestQuantize:
    def test_integers_are_fixed_points(self, rng):
        x = np.arange(-50, 51, dtype=float)
        np.testing.assert_array_equal(quantize(x, rng), x.astype(np.int64))

    def test_outputs_are_neighbouring_integers(self, rng):
        x = rng.uniform(-100, 100, 5000)
        q = quantize(x, rng)
        assert np.all((q == np.floor(x)) | (q == np.ceil(x)))

    def test_unbiased(self, rng):
        x = rng.uniform(-5, 5, 20)
        draws = 40_000
        samples = quantize(np.broadcast_to(x, (draws, x.size)), rng)
        se = np.sqrt((x - np.floor(x)) * (np.ceil(x) - x) / draws) + 1e-12
        assert np.all(np.abs(samples.mean(axis=0) - x) <= 4 * se)

    def test_variance_is_the_bernoulli_variance(self, rng):
        x = np.array([0.25, 1.5, -2.75, 3.9])
        draws = 100_000
        samples = quantize(np.broadcast_to(x, (draws, x.size)), rng)
        expected = (x - np.floor(x)) * (np.ceil(x) - x)
        np.testing.assert_allclose(samples.var(axis=0), expected, rtol=0.03)

    def test_scalar_form(self, rng):
        assert quantize_value(3.0, rng) == 3
        assert quantize_value(2.5, rng) in (2, 3)
        with pytest.raises(ValueError):
            quantize_value(np.nan, rng)

    def test_reproducible_per_seed(self):
        x = np.linspace(-3, 3, 101)
        np.testing.assert_array_equal(quantize(x, 7), quantize(x, 7))


class TestVote:
    def test_single_nonzero_gets_every_vote(self):
        bits = vote([0.0, 0.0, 2.0, 0.0], 10, rng=0)
        np.testing.assert_array_equal(bits, [False, False, True, False])

    def test_zero_entries_never_voted(self, rng):
        u = np.array([0.0, 1.0, 0.0, 3.0, 0.0])
        bits = vote_many(u, 50, 200, rng)
        assert not bits[:, [0, 2, 4]].any()

    def test_at_most_k_votes(self, rng):
        u = rng.normal(size=300)
        bits = vote_many(u, 17, 100, rng)
        assert bits.sum(axis=1).max() <= 17

    def test_vote_frequency_matches_closed_form(self, rng):
        u = np.array([4.0, 2.0, 1.0, 1.0])
        k, trials = 3, 50_000
        freq = vote_many(u, k, trials, rng).mean(axis=0)
        p = np.abs(u) / np.abs(u).sum()
        np.testing.assert_allclose(freq, 1 - (1 - p) ** k, atol=0.01)

    def test_all_zero_vector(self, rng):
        with pytest.raises(ValueError, match="all-zero"):
            vote(np.zeros(4), 2, rng)
        assert not safe_vote(np.zeros(4), 2, rng).any()


class TestCompressAndResidual:
    def test_only_gia_positions_are_sent(self, rng):
        u = rng.normal(size=50)
        gia = np.zeros(50, bool)
        gia[[3, 7, 19, 40]] = True
        cfg = make_quant_config(10, 4, np.abs(u).max())
        comp = compress(u, gia, cfg, rng)
        np.testing.assert_array_equal(comp.indices, [3, 7, 19, 40])
        dense = comp.to_dense()
        assert np.count_nonzero(dense[~gia]) == 0

    def test_empty_gia(self, rng):
        u = rng.normal(size=10)
        cfg = make_quant_config(8, 2, np.abs(u).max())
        comp = compress(u, np.zeros(10, bool), cfg, rng)
        assert len(comp) == 0
        np.testing.assert_array_equal(residual_update(u, comp, cfg), u)

    def test_residual_identity_is_exact(self, rng):
        u = rng.normal(size=200)
        gia = rng.random(200) < 0.3
        cfg = make_quant_config(12, 5, np.abs(u).max())
        comp = compress(u, gia, cfg, rng)
        e = residual_update(u, comp, cfg)
        np.testing.assert_allclose(cfg.scale * u, comp.to_dense() + cfg.scale * e, rtol=0,
                                   atol=1e-9)
        np.testing.assert_array_equal(e[~gia], u[~gia])
        assert np.all(np.abs(e[gia]) < 1.0 / cfg.scale)

    def test_magnitude_above_config_rejected(self, rng):
        cfg = make_quant_config(8, 2, 1.0)
        with pytest.raises(ValueError, match="max_abs"):
            compress(np.array([2.0, 0.0]), np.ones(2, bool), cfg, rng)

    def test_gia_length_checked(self, rng):
        cfg = make_quant_config(8, 2, 1.0)
        with pytest.raises(ValueError):
            compress(np.zeros(4), np.ones(3, bool), cfg, rng)
