"""Generative samplers: determinism, validity, and moment checks."""

from __future__ import annotations

import numpy as np
import pytest

from hpindex import caseshiller
from hpindex.errors import DomainError
from hpindex.ingest import IngestConfig, read_panel_csv, write_panel_csv
from hpindex.simulate import (
    ARTruth,
    CSTruth,
    MixedTruth,
    SimConfig,
    config_from_dict,
    config_to_dict,
    simulate_ar_panel,
    simulate_cs_panel,
    simulate_from_config,
    simulate_mixed_panel,
)


def _pairs_with_gaps(panel, latents=None):
    """(prev, next, gap) triples of latent values or log prices."""
    out = []
    for _, house, sales in panel.iter_houses():
        series = latents[house] if latents is not None else [s.log_price for s in sales]
        for j in range(1, len(sales)):
            out.append((series[j - 1], series[j], sales[j].quarter - sales[j - 1].quarter))
    return out


class TestDeterminismAndValidity:
    def test_same_seed_bit_identical(self):
        config = SimConfig(T=10, Z=3, houses_per_zip=25, seed=5)
        p1, t1, l1 = simulate_ar_panel(config)
        p2, t2, l2 = simulate_ar_panel(config)
        assert p1 == p2
        assert all(np.array_equal(l1[k], l2[k]) for k in l1)
        p3, _, _ = simulate_ar_panel(SimConfig(T=10, Z=3, houses_per_zip=25, seed=6))
        assert p1 != p3

    def test_panels_pass_invariants(self):
        for maker in (
            lambda c: simulate_ar_panel(c)[0],
            lambda c: simulate_mixed_panel(c)[0],
            lambda c: simulate_cs_panel(c)[0],
        ):
            panel = maker(SimConfig(T=12, Z=3, houses_per_zip=30, seed=7))
            panel.validate()

    def test_infeasible_sale_counts_rejected(self):
        with pytest.raises(DomainError):
            SimConfig(T=3, Z=1, houses_per_zip=1)  # default probs allow 4 sales

    def test_geometric_gap_mode(self):
        config = SimConfig(T=40, Z=3, houses_per_zip=200, seed=8,
                           gap_mode="geometric", mean_gap=5.0)
        panel, _, _ = simulate_ar_panel(config)
        panel.validate()
        gaps = [g for _, _, g in _pairs_with_gaps(panel)]
        assert 3.0 < float(np.mean(gaps)) < 8.0


class TestARMoments:
    def test_noise_free_is_pure_mean_structure(self):
        config = SimConfig(T=8, Z=2, houses_per_zip=20, seed=9)
        truth = ARTruth(mu=11.0, phi=0.9, sigma2_eps=1e-18, sigma2_tau=0.0)
        panel, params, _ = simulate_ar_panel(config, truth)
        for sale in panel.iter_sales():
            want = params.mu + params.beta[sale.quarter - 1]
            assert sale.log_price == pytest.approx(want, abs=1e-6)

    def test_first_sale_marginal_variance(self):
        config = SimConfig(
            T=8, Z=4, houses_per_zip=25000, seed=10,
            sale_count_probs=(1.0, 0.0, 0.0, 0.0),
        )
        truth = ARTruth(phi=0.9, sigma2_eps=0.01, sigma2_tau=0.0)
        panel, _, latents = simulate_ar_panel(config, truth)
        firsts = np.array([u[0] for u in latents.values()])
        want = truth.sigma2_eps / (1 - truth.phi**2)
        assert float(firsts.var()) == pytest.approx(want, rel=0.02)

    def test_pair_correlation_decays_like_phi_to_gap(self):
        config = SimConfig(
            T=14, Z=4, houses_per_zip=25000, seed=11,
            sale_count_probs=(0.0, 1.0, 0.0, 0.0),
        )
        truth = ARTruth(phi=0.9, sigma2_eps=0.01, sigma2_tau=0.0)
        panel, _, latents = simulate_ar_panel(config, truth)
        triples = _pairs_with_gaps(panel, latents)
        by_gap: dict[int, list] = {}
        for prev, nxt, gap in triples:
            by_gap.setdefault(gap, []).append((prev, nxt))
        for gap, pairs in sorted(by_gap.items()):
            if len(pairs) < 4000:
                continue
            arr = np.asarray(pairs)
            corr = float(np.corrcoef(arr[:, 0], arr[:, 1])[0, 1])
            assert corr == pytest.approx(truth.phi**gap, abs=0.02)


class TestMixedMoments:
    def test_all_variances_zero_is_deterministic(self):
        config = SimConfig(T=8, Z=2, houses_per_zip=20, seed=12)
        truth = MixedTruth(mu=11.0, sigma2_alpha=0.0, sigma2_tau=0.0, sigma2_eps=1e-18)
        panel, params = simulate_mixed_panel(config, truth)
        for sale in panel.iter_sales():
            want = params.mu + params.beta[sale.quarter - 1]
            assert sale.log_price == pytest.approx(want, abs=1e-6)

    def test_within_house_correlation_flat_in_gap(self):
        config = SimConfig(
            T=14, Z=4, houses_per_zip=20000, seed=13,
            sale_count_probs=(0.0, 1.0, 0.0, 0.0),
        )
        truth = MixedTruth(sigma2_alpha=0.05, sigma2_tau=0.0, sigma2_eps=0.05)
        panel, params = simulate_mixed_panel(config, truth)
        resid = {
            house: [s.log_price - params.mu - params.beta[s.quarter - 1] for s in sales]
            for _, house, sales in panel.iter_houses()
        }
        by_gap: dict[int, list] = {}
        for _, house, sales in panel.iter_houses():
            r = resid[house]
            for j in range(1, len(sales)):
                by_gap.setdefault(sales[j].quarter - sales[j - 1].quarter, []).append(
                    (r[j - 1], r[j])
                )
        want = truth.sigma2_alpha / (truth.sigma2_alpha + truth.sigma2_eps)
        corrs = []
        for gap, pairs in sorted(by_gap.items()):
            if len(pairs) < 3000:
                continue
            arr = np.asarray(pairs)
            corrs.append(float(np.corrcoef(arr[:, 0], arr[:, 1])[0, 1]))
        assert max(corrs) - min(corrs) < 0.05
        assert float(np.mean(corrs)) == pytest.approx(want, abs=0.03)

    def test_between_house_within_zip_covariance(self):
        config = SimConfig(
            T=6, Z=400, houses_per_zip=40, seed=14,
            sale_count_probs=(1.0, 0.0, 0.0, 0.0),
        )
        truth = MixedTruth(sigma2_alpha=0.02, sigma2_tau=0.08, sigma2_eps=0.02)
        panel, params = simulate_mixed_panel(config, truth)
        covs = []
        for z, houses in panel.zips.items():
            r = [
                s.log_price - params.mu - params.beta[s.quarter - 1]
                for hs in houses.values()
                for s in hs
            ]
            r = np.asarray(r)
            n = len(r)
            total = r.sum()
            cross = (total**2 - (r**2).sum()) / (n * (n - 1))
            covs.append(cross)
        assert float(np.mean(covs)) == pytest.approx(truth.sigma2_tau, rel=0.1)


class TestCSMoments:
    def test_zero_noise_prices_follow_index(self):
        config = SimConfig(T=6, Z=2, houses_per_zip=20, seed=15)
        index = np.array([1.0, 1.1, 1.2, 1.25, 1.3, 1.4])
        truth = CSTruth(sigma2_u=0.0, sigma2_v=0.0, index=index, base_sd_log=0.0)
        panel, _ = simulate_cs_panel(config, truth)
        for sale in panel.iter_sales():
            want = truth.base_price * index[sale.quarter - 1]
            assert sale.price == pytest.approx(want, rel=1e-12)

    def test_deflated_difference_variance(self):
        config = SimConfig(
            T=20, Z=4, houses_per_zip=15000, seed=16,
            sale_count_probs=(0.0, 1.0, 0.0, 0.0),
        )
        index = np.cumprod(np.concatenate([[1.0], np.full(19, 1.01)]))
        truth = CSTruth(sigma2_u=2.5e7, sigma2_v=4e6, index=index, base_price=2e5)
        panel, _ = simulate_cs_panel(config, truth)
        by_gap: dict[int, list] = {}
        for _, house, sales in panel.iter_houses():
            for j in range(1, len(sales)):
                prev, cur = sales[j - 1], sales[j]
                d = cur.price / index[cur.quarter - 1] - prev.price / index[prev.quarter - 1]
                by_gap.setdefault(cur.quarter - prev.quarter, []).append(d)
        for gap, diffs in sorted(by_gap.items()):
            if len(diffs) < 2500:
                continue
            want = 2 * truth.sigma2_u + gap * truth.sigma2_v
            assert float(np.var(diffs)) == pytest.approx(want, rel=0.08)

    def test_fit_recovers_index_path(self):
        config = SimConfig(T=16, Z=4, houses_per_zip=8000, seed=17,
                           sale_count_probs=(0.0, 1.0, 0.0, 0.0))
        index = np.cumprod(np.concatenate([[1.0], 1 + np.linspace(0.0, 0.03, 15)]))
        truth = CSTruth(sigma2_u=1e7, sigma2_v=2e6, index=index, base_price=2e5)
        panel, _ = simulate_cs_panel(config, truth)
        fitted = caseshiller.fit(panel)
        np.testing.assert_allclose(fitted.B, index / index[0], rtol=0.01)


class TestConfigRoundTrip:
    def test_csv_round_trip(self, tmp_path):
        config = SimConfig(T=10, Z=3, houses_per_zip=30, seed=18)
        panel, _, _ = simulate_ar_panel(config)
        path = tmp_path / "sim.csv"
        write_panel_csv(panel, path)
        rebuilt, _, _ = read_panel_csv(path, IngestConfig())
        assert rebuilt == panel

    def test_json_config_round_trip(self):
        config = SimConfig(T=10, Z=3, houses_per_zip=30, seed=19)
        for kind, truth in (
            ("ar", ARTruth()),
            ("mixed", MixedTruth()),
            ("cs", CSTruth()),
        ):
            doc = config_to_dict(config, kind, truth)
            config2, kind2, truth2 = config_from_dict(doc)
            assert config2 == config
            assert kind2 == kind
            panel, _ = simulate_from_config(doc)
            panel.validate()
