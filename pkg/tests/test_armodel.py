"""Autoregressive model: transform, likelihood, updates, fit, prediction.

The fast blockwise implementations are checked against dense-matrix
oracles built independently in ``oracles.py``; the scalar coordinate
updates are checked against golden-section maximization of the dense
likelihood slices.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import panel_from_rows, random_params
from hpindex import armodel
from hpindex.armodel import (
    ARFitConfig,
    ARParams,
    build_transform,
    estimate_tau,
    fit,
    log_likelihood,
    predict,
    prepare_training,
    update_beta,
    update_phi,
    update_sigma_eps,
    update_sigma_tau,
)
from hpindex.data import Sale
from hpindex.errors import (
    DomainError,
    IdentifiabilityError,
    SchemaVersionError,
)
from hpindex.simulate import ARTruth, SimConfig, simulate_ar_panel
from oracles import (
    dense_ar_gls,
    dense_ar_henderson_tau,
    dense_ar_loglik,
    golden_max,
)


def _sale(house, zip_code, quarter, price, ordinal):
    return Sale(house, zip_code, quarter, float(price), math.log(price), ordinal)


def _small_panel(seed=0, T=8, Z=3, houses_per_zip=15, phi=0.9, s2e=0.01, s2t=0.03):
    config = SimConfig(T=T, Z=Z, houses_per_zip=houses_per_zip, seed=seed)
    truth = ARTruth(mu=11.5, phi=phi, sigma2_eps=s2e, sigma2_tau=s2t)
    panel, params, _ = simulate_ar_panel(config, truth)
    return panel, params


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------


class TestBuildTransform:
    def test_single_sale(self):
        block = build_transform([_sale("H1", "Z1", 3, 1e5, 1)], phi=0.5)
        assert np.array_equal(block.dense(), np.eye(1))
        assert np.array_equal(block.r, [1.0])
        assert np.array_equal(block.t_ones, [1.0])

    def test_gap_two_at_phi_half(self):
        sales = [_sale("H1", "Z1", 1, 1e5, 1), _sale("H1", "Z1", 3, 1.2e5, 2)]
        block = build_transform(sales, phi=0.5)
        # phi**gap = 0.25, 1 - phi**(2*gap) = 1 - 0.0625
        assert block.sub_values.tolist() == [-0.25]
        assert block.r.tolist() == [1.0, 0.9375]
        assert block.t_ones.tolist() == [1.0, 0.75]

    def test_phi_zero_limit_is_identity(self):
        sales = [_sale("H1", "Z1", 1, 1e5, 1), _sale("H1", "Z1", 3, 1.2e5, 2)]
        block = build_transform(sales, phi=0.0)
        assert np.array_equal(block.dense(), np.eye(2))
        assert np.array_equal(block.r, np.ones(2))

    def test_apply_matches_dense(self):
        sales = [
            _sale("H1", "Z1", 1, 1e5, 1),
            _sale("H1", "Z1", 4, 1.2e5, 2),
            _sale("H2", "Z1", 2, 2e5, 1),
            _sale("H2", "Z1", 3, 2.1e5, 2),
        ]
        block = build_transform(sales, phi=0.8)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.allclose(block.apply(x), block.dense() @ x)

    def test_rejects_bad_gap(self):
        sales = [_sale("H1", "Z1", 3, 1e5, 1), _sale("H1", "Z1", 3, 1.2e5, 2)]
        with pytest.raises(Exception):
            build_transform(sales, phi=0.5)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


class TestLogLikelihood:
    def test_single_standard_normal_sale(self):
        # one sale, unit marginal variance, zero mean: density of N(0,1) at 0
        panel = panel_from_rows([("H1", "Z1", 1, 1.0)])
        phi = 0.5
        params = ARParams(
            mu=0.0, beta=np.zeros(1), phi=phi, sigma2_eps=1 - phi**2, sigma2_tau=0.0
        )
        assert log_likelihood(params, panel) == pytest.approx(
            -0.5 * math.log(2 * math.pi), abs=1e-12
        )

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            panel, _ = _small_panel(seed=seed)
            params = random_params(rng, panel.T)
            assert log_likelihood(params, panel) == pytest.approx(
                dense_ar_loglik(panel, params), abs=1e-8
            )

    def test_sigma_tau_zero_is_independent_gaussians(self):
        panel, _ = _small_panel(seed=3)
        rng = np.random.default_rng(5)
        params = replace(random_params(rng, panel.T), sigma2_tau=0.0)
        tr = prepare_training(panel)
        pieces = armodel._PhiPieces(tr, params.phi)
        c = params.sigma2_eps / (1 - params.phi**2)
        w = tr.y - params.mu - params.beta[tr.quarter0]
        tw = armodel._apply_T(tr, pieces.phig, w)
        var = c * pieces.r
        direct = float(
            -0.5 * (np.log(2 * np.pi * var) + tw**2 / var).sum()
        )
        assert log_likelihood(params, panel) == pytest.approx(direct, abs=1e-9)

    def test_rejects_nonpositive_sigma_eps(self):
        panel, _ = _small_panel()
        with pytest.raises(DomainError):
            ARParams(mu=0, beta=np.zeros(panel.T), phi=0.5, sigma2_eps=0.0, sigma2_tau=0.0)


# ---------------------------------------------------------------------------
# coordinate updates
# ---------------------------------------------------------------------------


class TestUpdateBeta:
    def test_reduces_to_quarter_means_for_iid_single_sales(self):
        rows = [
            ("H1", "Z1", 1, 100000), ("H2", "Z1", 1, 120000),
            ("H3", "Z1", 2, 150000), ("H4", "Z2", 2, 160000), ("H5", "Z2", 3, 90000),
        ]
        panel = panel_from_rows(rows)
        params = ARParams(
            mu=0.0, beta=np.zeros(3), phi=0.0, sigma2_eps=1.0, sigma2_tau=0.0
        )
        updated = update_beta(params, panel)
        logs = {q: [] for q in (1, 2, 3)}
        for sale in panel.iter_sales():
            logs[sale.quarter].append(sale.log_price)
        for q, values in logs.items():
            assert updated.mu + updated.beta[q - 1] == pytest.approx(
                float(np.mean(values)), abs=1e-10
            )

    def test_matches_dense_gls(self):
        rng = np.random.default_rng(21)
        for seed in range(4):
            panel, _ = _small_panel(seed=seed + 10)
            params = random_params(rng, panel.T)
            updated = update_beta(params, panel)
            mu_dense, beta_dense = dense_ar_gls(panel, params)
            assert updated.mu == pytest.approx(mu_dense, abs=1e-8)
            np.testing.assert_allclose(updated.beta, beta_dense, atol=1e-8)

    def test_recovers_beta_without_noise(self):
        config = SimConfig(T=10, Z=4, houses_per_zip=60, seed=5)
        truth = ARTruth(mu=11.0, phi=0.9, sigma2_eps=1e-12, sigma2_tau=0.0)
        panel, params_true, _ = simulate_ar_panel(config, truth)
        start = replace(params_true, beta=np.zeros(panel.T), mu=0.0)
        updated = update_beta(start, panel)
        np.testing.assert_allclose(updated.beta, params_true.beta, atol=1e-4)
        assert updated.mu == pytest.approx(params_true.mu, abs=1e-4)

    def test_constraint_holds_after_update(self):
        panel, _ = _small_panel(seed=2)
        rng = np.random.default_rng(3)
        updated = update_beta(random_params(rng, panel.T), panel)
        tr = prepare_training(panel)
        assert updated.check_constraint(tr.n_t)

    def test_names_empty_quarters(self):
        panel = panel_from_rows([("H1", "Z1", 1, 1e5), ("H2", "Z1", 3, 1e5)])
        params = ARParams(mu=0, beta=np.zeros(3), phi=0.5, sigma2_eps=1.0, sigma2_tau=0.0)
        with pytest.raises(IdentifiabilityError, match="2"):
            update_beta(params, panel)


def _slice_argmax_dense(panel, params, which, lo, hi):
    def f(v):
        if which == "sigma2_eps":
            p = replace(params, sigma2_eps=v)
        elif which == "sigma2_tau":
            p = replace(params, sigma2_tau=v)
        else:
            p = replace(params, phi=v)
        return dense_ar_loglik(panel, p)

    return golden_max(f, lo, hi)


class TestScalarUpdates:
    def test_sigma_eps_matches_golden_section(self):
        rng = np.random.default_rng(31)
        for seed in range(3):
            panel, truth = _small_panel(seed=seed + 20)
            params = replace(
                truth, sigma2_eps=float(rng.uniform(0.005, 0.02))
            )
            root = update_sigma_eps(params, panel)
            golden = _slice_argmax_dense(panel, params, "sigma2_eps", 1e-6, 0.5)
            assert root == pytest.approx(golden, rel=1e-5)

    def test_sigma_eps_stationarity(self):
        panel, truth = _small_panel(seed=24)
        root = update_sigma_eps(truth, panel)
        at_root = log_likelihood(replace(truth, sigma2_eps=root), panel)
        assert at_root >= log_likelihood(replace(truth, sigma2_eps=root * 1.1), panel)
        assert at_root >= log_likelihood(replace(truth, sigma2_eps=root * 0.9), panel)

    def test_sigma_eps_degenerate_zero_residuals(self):
        config = SimConfig(T=6, Z=2, houses_per_zip=10, seed=8)
        truth = ARTruth(mu=11.0, phi=0.9, sigma2_eps=1e-15, sigma2_tau=0.0)
        panel, params_true, _ = simulate_ar_panel(config, truth)
        root = update_sigma_eps(replace(params_true, sigma2_eps=0.01), panel)
        assert root == pytest.approx(1e-12, abs=1e-13)

    def test_sigma_tau_matches_golden_section(self):
        rng = np.random.default_rng(41)
        for seed in range(3):
            panel, truth = _small_panel(seed=seed + 30, s2t=0.05)
            params = replace(truth, sigma2_tau=float(rng.uniform(0.001, 0.2)))
            root = update_sigma_tau(params, panel)
            golden = _slice_argmax_dense(panel, params, "sigma2_tau", 1e-8, 1.0)
            assert root == pytest.approx(golden, rel=1e-5, abs=1e-7)

    def test_sigma_tau_boundary_zero(self):
        # enough sales per ZIP that the zero-variance truth is detectable
        config = SimConfig(T=8, Z=15, houses_per_zip=150, seed=9)
        truth = ARTruth(mu=11.0, phi=0.5, sigma2_eps=0.001, sigma2_tau=0.0)
        panel, params_true, _ = simulate_ar_panel(config, truth)
        fitted = fit(panel)
        assert fitted.params.sigma2_tau <= 1e-4

    def test_sigma_tau_stationarity(self):
        panel, truth = _small_panel(seed=33)
        root = update_sigma_tau(truth, panel)
        if root > 0:
            at_root = log_likelihood(replace(truth, sigma2_tau=root), panel)
            assert at_root >= log_likelihood(replace(truth, sigma2_tau=root * 1.1), panel)
            assert at_root >= log_likelihood(replace(truth, sigma2_tau=root * 0.9), panel)

    def test_phi_matches_golden_section(self):
        rng = np.random.default_rng(51)
        for seed in range(3):
            panel, truth = _small_panel(seed=seed + 40, phi=0.9)
            params = replace(truth, phi=float(rng.uniform(0.5, 0.95)))
            root = update_phi(params, panel)
            golden = _slice_argmax_dense(panel, params, "phi", 1e-4, 1 - 1e-4)
            assert root == pytest.approx(golden, abs=1e-5)

    def test_phi_not_identifiable_without_repeats(self):
        panel = panel_from_rows([(f"H{i}", "Z1", 1 + i % 4, 1e5 + i) for i in range(20)])
        params = ARParams(mu=11, beta=np.zeros(4), phi=0.5, sigma2_eps=0.01, sigma2_tau=0.0)
        with pytest.raises(IdentifiabilityError):
            update_phi(params, panel)

    def test_scores_match_numerical_derivative(self):
        # each score is a positive multiple of the likelihood slope, so it
        # must agree in sign and (where exact) in value with finite differences
        panel, truth = _small_panel(seed=44)
        tr = prepare_training(panel)
        params = truth
        eps = 1e-7

        def dll(attr, v0):
            up = log_likelihood(replace(params, **{attr: v0 + eps}), tr)
            dn = log_likelihood(replace(params, **{attr: v0 - eps}), tr)
            return (up - dn) / (2 * eps)

        pieces = armodel._PhiPieces(tr, params.phi)
        w = tr.y - params.mu - params.beta[tr.quarter0]
        tw = armodel._apply_T(tr, pieces.phig, w)
        s_eps = armodel._score_sigma_eps(
            params.sigma2_eps, tr, pieces, tw, params.phi, params.sigma2_tau
        )
        # score = 2 (1 - phi^2) dlogL/dsigma2_eps
        assert s_eps == pytest.approx(
            2 * (1 - params.phi**2) * dll("sigma2_eps", params.sigma2_eps), rel=1e-4
        )
        s_tau = armodel._score_sigma_tau(
            params.sigma2_tau, tr, pieces, tw, params.phi, params.sigma2_eps
        )
        assert s_tau == pytest.approx(2 * dll("sigma2_tau", params.sigma2_tau), rel=1e-4)
        s_phi = armodel._score_phi(params.phi, tr, w, params.sigma2_eps, params.sigma2_tau)
        assert s_phi == pytest.approx(2 * dll("phi", params.phi), rel=1e-4)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


class TestFit:
    def test_trace_monotone_and_converges(self):
        panel, _ = _small_panel(seed=60, T=10, Z=4, houses_per_zip=40)
        model = fit(panel)
        assert model.converged
        trace = np.asarray(model.loglik_trace)
        assert (np.diff(trace) >= -1e-9).all()

    def test_each_coordinate_update_is_ascent(self):
        panel, truth = _small_panel(seed=61)
        tr = prepare_training(panel)
        params = armodel._initial_params(tr, ARFitConfig())
        for _ in range(3):
            before = log_likelihood(params, tr)
            params = update_beta(params, tr)
            after_beta = log_likelihood(params, tr)
            assert after_beta >= before - 1e-9
            params = replace(params, sigma2_eps=update_sigma_eps(params, tr))
            after_eps = log_likelihood(params, tr)
            assert after_eps >= after_beta - 1e-9
            params = replace(params, sigma2_tau=update_sigma_tau(params, tr))
            after_tau = log_likelihood(params, tr)
            assert after_tau >= after_eps - 1e-9
            params = replace(params, phi=update_phi(params, tr))
            assert log_likelihood(params, tr) >= after_tau - 1e-9

    def test_refit_from_converged_values_stops_quickly(self):
        panel, _ = _small_panel(seed=62, T=10, Z=4, houses_per_zip=40)
        model = fit(panel)
        config = ARFitConfig(init_phi=model.params.phi)
        tr = prepare_training(panel)
        # warm restart: run the loop manually from the fitted values
        params = model.params
        moves = 0
        for _ in range(2):
            prev = params
            params = update_beta(params, tr)
            params = replace(params, sigma2_eps=update_sigma_eps(params, tr))
            params = replace(params, sigma2_tau=update_sigma_tau(params, tr))
            params = replace(params, phi=update_phi(params, tr))
            moves += 1
            if (
                abs(params.phi - prev.phi) < config.tol_phi
                and abs(params.sigma2_eps - prev.sigma2_eps) < config.tol_var
                and abs(params.sigma2_tau - prev.sigma2_tau) < config.tol_var
                and abs(params.mu - prev.mu) < config.tol_beta
                and float(np.abs(params.beta - prev.beta).max()) < config.tol_beta
            ):
                break
        assert moves <= 2

    def test_constraint_after_fit(self):
        panel, _ = _small_panel(seed=63)
        model = fit(panel)
        assert model.params.check_constraint(model.n_t)

    def test_requires_every_quarter(self):
        panel = panel_from_rows(
            [("H1", "Z1", 1, 1e5), ("H1", "Z1", 4, 1.1e5), ("H2", "Z1", 4, 1e5)]
        )
        with pytest.raises(IdentifiabilityError, match="[23]"):
            fit(panel)

    def test_requires_repeat_sales(self):
        panel = panel_from_rows([(f"H{i}", "Z1", 1 + i % 3, 1e5) for i in range(9)])
        with pytest.raises(IdentifiabilityError, match="repeat"):
            fit(panel)


# ---------------------------------------------------------------------------
# ZIP effects
# ---------------------------------------------------------------------------


class TestEstimateTau:
    def test_zero_variance_gives_zero(self):
        panel, truth = _small_panel(seed=70)
        params = replace(truth, sigma2_tau=0.0)
        assert np.array_equal(estimate_tau(params, panel), np.zeros(panel.Z))

    def test_no_shrinkage_limit_is_weighted_zip_mean(self):
        panel, truth = _small_panel(seed=71)
        tr = prepare_training(panel)
        params = replace(truth, sigma2_tau=1e12)
        tau = estimate_tau(params, tr, prior_factor=2.0)
        pieces = armodel._PhiPieces(tr, params.phi)
        w = tr.y - params.mu - params.beta[tr.quarter0]
        tw = armodel._apply_T(tr, pieces.phig, w)
        num = np.add.reduceat(pieces.a * tw / pieces.r, tr.zip_starts)
        den = np.add.reduceat(pieces.a**2 / pieces.r, tr.zip_starts)
        np.testing.assert_allclose(tau, num / den, atol=1e-8)

    def test_matches_dense_henderson_with_unit_factor(self):
        # the joint mixed-model-equations solve corresponds to prior factor 1
        for seed in (80, 81):
            panel, truth = _small_panel(seed=seed)
            params = update_beta(truth, panel)
            tau = estimate_tau(params, panel, prior_factor=1.0)
            dense = dense_ar_henderson_tau(panel, params)
            np.testing.assert_allclose(tau, dense, atol=1e-6)

    def test_published_factor_shrinks_more(self):
        panel, truth = _small_panel(seed=82)
        params = update_beta(truth, panel)
        t1 = estimate_tau(params, panel, prior_factor=1.0)
        t2 = estimate_tau(params, panel, prior_factor=2.0)
        assert (np.abs(t2) <= np.abs(t1) + 1e-15).all()


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


class TestPredict:
    @staticmethod
    def _model(T=5, phi=0.9, msr=0.0):
        params = ARParams(
            mu=11.0,
            beta=np.linspace(-0.02, 0.02, T),
            phi=phi,
            sigma2_eps=0.001,
            sigma2_tau=0.01,
        )
        return armodel.FittedARModel(
            params=params,
            tau_hat={"Z1": 0.05},
            msr=msr,
            iterations=1,
            converged=True,
            loglik_trace=[],
        )

    def test_shrinkage_weight_anchor(self):
        # effective correlation for the typical 22-quarter gap
        assert 0.993247**22 == pytest.approx(0.8615, abs=5e-5)
        model = self._model(T=30, phi=0.993247)
        prev = _sale("H1", "Z1", 1, 2e5, 1)
        p = model.params
        got = predict(model, prev, "Z1", 23)
        weight = 0.993247**22
        expected = math.exp(
            p.mu + p.beta[22] + 0.05
            + weight * (prev.log_price - p.mu - p.beta[0] - 0.05)
        )
        assert got == pytest.approx(expected, rel=1e-12)

    def test_huge_gap_equals_marginal_prediction(self):
        model = self._model(T=2_000_000, phi=0.99)
        model.params.beta[:] = 0.0
        prev = _sale("H1", "Z1", 1, 2e5, 1)
        with_prev = predict(model, prev, "Z1", 1_000_001)
        without = predict(model, None, "Z1", 1_000_001)
        assert with_prev == pytest.approx(without, rel=1e-12)

    def test_unseen_zip_uses_zero_effect(self):
        model = self._model()
        assert predict(model, None, "ZX", 2) == pytest.approx(
            math.exp(model.params.mu + model.params.beta[1]), rel=1e-12
        )

    def test_quarter_out_of_range(self):
        model = self._model()
        with pytest.raises(DomainError):
            predict(model, None, "Z1", 6)
        with pytest.raises(DomainError):
            predict(model, _sale("H1", "Z1", 4, 1e5, 1), "Z1", 4)

    def test_zero_noise_simulation_predicts_prices(self):
        config = SimConfig(T=10, Z=3, houses_per_zip=40, seed=90)
        truth = ARTruth(mu=11.0, phi=0.9, sigma2_eps=1e-12, sigma2_tau=0.0)
        panel, _, _ = simulate_ar_panel(config, truth)
        model = fit(panel)
        for _, house, sales in list(panel.iter_houses())[:30]:
            for j, sale in enumerate(sales):
                prev = sales[j - 1] if j else None
                got = predict(model, prev, sale.zip_code, sale.quarter)
                assert got == pytest.approx(sale.price, rel=1e-3)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


class TestPersistence:
    def test_round_trip(self, tmp_path):
        panel, _ = _small_panel(seed=95)
        model = fit(panel)
        path = tmp_path / "model.json"
        armodel.save(model, path)
        loaded = armodel.load(path)
        assert loaded.params.phi == model.params.phi
        np.testing.assert_array_equal(loaded.params.beta, model.params.beta)
        assert loaded.tau_hat == model.tau_hat
        assert loaded.msr == model.msr
        assert loaded.converged == model.converged

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"format": "ar-model/999"}')
        with pytest.raises(SchemaVersionError):
            armodel.load(path)
