import math

import numpy as np
import pytest
from scipy.special import expit, logit

from spatialcc.sampler import SamplerConfig
from spatialcc.simulation import (Estimates, SimScenario, SimTruth,
                                  SimulationError, StudyConfig,
                                  calibrate_intercept, fit_logistic_irls,
                                  fit_m1, fit_m2, fit_m3, generate_dataset,
                                  m2_offset, run_simulation, run_study,
                                  sample_icar, score, score_fit)

import spatialcc.simulation as sim_mod
from oracles import newton_logistic


def scenario(n=300, pi=0.05, pi_hat=0.3, spatial_i=0.5, map_name="lattice5",
             seed=123):
    return SimScenario(n=n, pi=pi, pi_hat=pi_hat, spatial_i=spatial_i,
                       map_name=map_name, seed=seed)


class TestSampleIcar:
    def test_sum_to_zero_every_draw(self, lattice3):
        rng = np.random.default_rng(0)
        for _ in range(20):
            psi = sample_icar(lattice3, rng)
            assert abs(psi.sum()) < 1e-10

    def test_two_node_variance(self, two_node_graph):
        rng = np.random.default_rng(1)
        draws = sample_icar(two_node_graph, rng, size=100_000)
        assert np.allclose(draws[:, 0], -draws[:, 1], atol=1e-12)
        assert np.var(draws[:, 0]) == pytest.approx(0.25, abs=0.01)

    def test_path3_covariance_matches_pseudo_inverse(self, path3_graph):
        rng = np.random.default_rng(2)
        n_draws = 100_000
        draws = sample_icar(path3_graph, rng, size=n_draws)
        q_plus = np.linalg.pinv(path3_graph.laplacian(), hermitian=True)
        emp = draws.T @ draws / n_draws
        # entrywise 3-sigma band for a Gaussian fourth-moment estimator
        for i in range(3):
            for j in range(3):
                se = math.sqrt((q_plus[i, i] * q_plus[j, j] + q_plus[i, j] ** 2)
                               / n_draws)
                assert abs(emp[i, j] - q_plus[i, j]) < 3 * se


class TestCalibrateIntercept:
    def test_symmetry(self):
        assert calibrate_intercept(0.5, np.zeros(100)) == pytest.approx(0.0, abs=1e-7)

    def test_offset_cancellation(self):
        fixed = np.full(400, math.log(2.0))
        assert calibrate_intercept(0.5, fixed) == pytest.approx(-math.log(2.0),
                                                                abs=1e-7)

    def test_random_fixed_parts_hit_target(self):
        rng = np.random.default_rng(3)
        fixed = rng.normal(1.0, 2.0, size=500)
        b = calibrate_intercept(0.17, fixed)
        assert float(np.mean(expit(fixed + b))) == pytest.approx(0.17, abs=1e-8)

    def test_unreachable_target_reports_extreme(self):
        fixed = np.full(50, -500.0)
        assert calibrate_intercept(0.9, fixed) == 50.0


class TestGenerateDataset:
    def test_labels_never_exceed_states(self):
        truth = generate_dataset(scenario(seed=5))
        assert np.all(truth.y <= truth.r)
        assert not np.any((truth.r == 0) & (truth.y == 1))

    def test_label_share_near_target(self):
        truth = generate_dataset(scenario(n=2000, pi_hat=0.3, seed=6))
        share = truth.y.mean()
        bound = 3 * math.sqrt(0.3 * 0.7 / 2000)
        # two layers of binomial noise (states then labels); allow both
        assert abs(share - truth.theta1 * truth.r.mean()) < bound
        assert abs(truth.r.mean() - 0.3) < 2 * bound

    def test_mu_star_excludes_offset(self):
        truth = generate_dataset(scenario(seed=7))
        reconstructed = (truth.beta1_star + truth.x * truth.beta2
                         + truth.gamma_true[truth.area_id])
        assert np.allclose(truth.mu_star, reconstructed, atol=1e-12)

    def test_m2_offset_converges_to_generated_as_pi_shrinks(self):
        # the assumed (non-contaminated) offset approaches the generated
        # (contaminated) one only in the pi -> 0 limit at fixed pi_hat
        gaps = []
        for pi in (0.05, 0.005, 0.0005, 5e-6):
            truth = generate_dataset(scenario(pi=pi, pi_hat=0.4, seed=8))
            gaps.append(abs(m2_offset(truth.n1, truth.n_u, pi) - truth.log_offset))
        assert all(np.diff(gaps) < 0)
        assert gaps[-1] < 1e-3

    def test_scenario_validation(self):
        with pytest.raises(SimulationError):
            scenario(n=50)
        with pytest.raises(SimulationError):
            scenario(pi=0.7)
        with pytest.raises(SimulationError):
            scenario(map_name="atlantis")

    def test_flat_areas_and_uncontaminated(self):
        truth = generate_dataset(scenario(seed=9), contaminated=False,
                                 flat_areas=True)
        assert np.all(truth.gamma_true == 0.0)
        assert truth.theta1 == 1.0
        assert np.array_equal(truth.y, truth.r)


class TestIrls:
    def test_intercept_only_closed_form(self):
        y = np.array([1, 1, 1, 0, 0, 0, 1, 0, 1, 1])  # 6 cases of 10
        truth = SimTruth(
            scenario=scenario(), gamma_true=np.zeros(25), beta1_init=0.0,
            beta1_star=0.0, beta2=0.0, x=np.zeros(10),
            area_id=np.zeros(10, dtype=np.int64),
            mu_star=np.zeros(10), r=np.zeros(10, dtype=np.int64),
            y=y, n1=3.0, n_u=7.0,
            theta1=0.9, log_offset=1.0, realized_moran_i=0.0)
        est = fit_m1(truth)
        assert est.beta1 == pytest.approx(logit(0.6), abs=1e-6)

    def test_matches_newton_oracle_on_12_rows(self):
        rng = np.random.default_rng(10)
        X = np.column_stack([np.ones(12), rng.normal(size=12),
                             (rng.uniform(size=12) > 0.5).astype(float)])
        y = np.array([0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0])
        fit = fit_logistic_irls(X, y)
        expected = newton_logistic(X, y)
        assert np.max(np.abs(fit.coef - expected)) < 1e-6
        assert fit.converged and not fit.separated

    def test_offset_shifts_intercept_exactly(self):
        rng = np.random.default_rng(11)
        X = np.column_stack([np.ones(200), rng.normal(size=200)])
        y = (rng.uniform(size=200) < expit(-1.0 + X[:, 1])).astype(float)
        base = fit_logistic_irls(X, y)
        shifted = fit_logistic_irls(X, y, offset=1.5)
        assert shifted.coef[0] == pytest.approx(base.coef[0] - 1.5, abs=1e-6)
        assert shifted.coef[1] == pytest.approx(base.coef[1], abs=1e-6)

    def test_perfect_separation_flagged(self):
        X = np.column_stack([np.ones(20), np.r_[np.full(10, -2.0), np.full(10, 2.0)]])
        y = np.r_[np.zeros(10), np.ones(10)]
        fit = fit_logistic_irls(X, y)
        assert fit.separated


class TestM2:
    def test_reduces_to_m1_when_pi_matches(self):
        truth = generate_dataset(scenario(pi=0.3, pi_hat=0.3, seed=12))
        assert m2_offset(truth.n1, truth.n_u, 0.3) == pytest.approx(0.0, abs=1e-12)
        m1 = fit_m1(truth)
        m2 = fit_m2(truth)
        assert m1.beta1 == pytest.approx(m2.beta1, abs=1e-9)
        assert m1.beta2 == pytest.approx(m2.beta2, abs=1e-9)

    def test_hand_offset_value(self):
        # pi_hat=0.5 means n1 = n_u, so the offset is log((1-pi)/pi)
        assert m2_offset(100.0, 100.0, 0.1) == pytest.approx(math.log(9.0), abs=1e-12)

    def test_beta2_recovery_on_benign_dgp(self):
        hits = 0
        for k in range(50):
            truth = generate_dataset(
                scenario(n=500, pi=0.2, pi_hat=0.35, seed=1000 + k),
                contaminated=False, flat_areas=True)
            est = fit_m2(truth)
            cov = est.extra["cov"]
            se = math.sqrt(cov[1, 1])
            if abs(est.beta2 - truth.beta2) <= 2.0 * se:
                hits += 1
        assert hits >= 44  # ~95% nominal coverage at 2 SE


class TestScore:
    def test_exact_match(self):
        s = score(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert s.bias == 0.0
        assert s.rmse_paper == 0.0
        # the zero-variance rule allows undefined-or-one
        assert math.isnan(s.pearson) or s.pearson == pytest.approx(1.0)

    def test_constant_shift(self):
        s = score(np.array([1.0, 2.0, 3.0]) + 1.0, np.array([1.0, 2.0, 3.0]))
        assert s.bias == pytest.approx(1.0)
        assert s.rmse_paper == pytest.approx(1.0)
        assert s.rmse_strict == pytest.approx(1.0)
        assert s.pearson == pytest.approx(1.0)

    def test_hand_spreadsheet_values(self):
        rng = np.random.default_rng(13)
        f = rng.normal(size=10)
        fh = f + rng.normal(size=10) * 0.5
        s = score(fh, f)
        err = fh - f
        assert s.bias == pytest.approx(sum(err) / 10)
        assert s.rmse_paper == pytest.approx(sum(e * e for e in err) / 10)
        num = np.sum((fh - fh.mean()) * (f - f.mean()))
        den = math.sqrt(np.sum((fh - fh.mean()) ** 2) * np.sum((f - f.mean()) ** 2))
        assert s.pearson == pytest.approx(num / den)

    def test_translation_consistency(self):
        rng = np.random.default_rng(14)
        f = rng.normal(size=20)
        fh = f + rng.normal(size=20)
        s0 = score(fh, f)
        s1 = score(fh + 3.3, f + 3.3)
        assert s1.pearson == pytest.approx(s0.pearson, rel=1e-12)
        assert s1.rmse_paper == pytest.approx(s0.rmse_paper, rel=1e-12)
        assert s1.bias == pytest.approx(s0.bias, abs=1e-12)

    def test_scalar_quantities(self):
        s = score(2.5, 2.0)
        assert s.bias == pytest.approx(0.5)
        assert math.isnan(s.pearson)


class TestM3Smoke:
    def test_small_fit_recovers_scales(self):
        truth = generate_dataset(scenario(n=200, pi=0.15, pi_hat=0.4, seed=21))
        cfg = SamplerConfig(n_chains=2, n_iter=600, n_warmup=400, thin=1, seed=3)
        est = fit_m3(truth, cfg)
        assert math.isfinite(est.beta1) and math.isfinite(est.beta2)
        assert est.mu_star.shape == truth.mu_star.shape
        assert est.gamma.size == est.observed_areas.size
        lo, hi = est.extra["beta2_interval"]
        assert lo < hi
        scores = score_fit(est, truth)
        assert scores["mu_star"].rmse_paper < 25.0


class TestStudy:
    def test_oracle_fitter_gives_trivial_scores(self, monkeypatch):
        def oracle(truth, cfg):
            observed = np.array(sorted(set(truth.area_id.tolist())), dtype=np.int64)
            return Estimates(mu_star=truth.mu_star.copy(),
                             beta1=truth.beta1_star, beta2=truth.beta2,
                             gamma=truth.gamma_true[observed],
                             observed_areas=observed)

        monkeypatch.setitem(sim_mod.FITTERS, "m1", oracle)
        config = StudyConfig(n_sims=2, seed=1, n_range=(100, 300), models=("m1",))
        rows = run_study(config)
        assert len(rows) == 2 * 1 * 4
        for row in rows:
            assert row["bias"] == pytest.approx(0.0, abs=1e-12)
            assert row["rmse_paper"] == pytest.approx(0.0, abs=1e-12)

    def test_row_count_and_columns(self):
        config = StudyConfig(n_sims=3, seed=2, n_range=(100, 300),
                             models=("m1", "m2"))
        rows = run_study(config)
        assert len(rows) == 3 * 2 * 4
        for key in ("sim", "model", "quantity", "bias", "rmse_paper",
                    "rmse_strict", "pearson", "pi", "pi_hat", "pi_gap",
                    "spatial_i", "realized_i", "n", "map", "seed", "redraws"):
            assert key in rows[0]

    def test_replay_by_seed(self):
        config = StudyConfig(n_sims=2, seed=3, n_range=(100, 200), models=("m2",))
        rows_a = run_simulation(config, 1)
        rows_b = run_simulation(config, 1)
        assert len(rows_a) == len(rows_b)
        for a, b in zip(rows_a, rows_b):
            assert a.keys() == b.keys()
            for key in a:
                va, vb = a[key], b[key]
                if isinstance(va, float) and math.isnan(va):
                    assert math.isnan(vb)
                else:
                    assert va == vb

    def test_regime_split(self):
        config = StudyConfig(n_sims=6, seed=4, n_range=(100, 150), models=("m1",))
        rows = run_study(config)
        pis = {row["sim"]: row["pi"] for row in rows}
        assert all(pis[i] <= 0.1 for i in range(3))
        assert all(pis[i] >= 0.1 for i in range(3, 6))
