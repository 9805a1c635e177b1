import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlasovlab.formfactor import build_form_factor
from vlasovlab.kernels import CoulombKernel
from vlasovlab.measures import DensityField, DiscreteMeasure
from vlasovlab.meanfield import GridSpec, deposit
from vlasovlab.transport import (ConvergenceError, GroundMetric,
                                 RenormalizedDistance, SizeOverflowError,
                                 bounded_lipschitz, kantorovich_dual_check,
                                 modified_distance, smear_measure,
                                 subatom_template, template_slack,
                                 verify_density_bound_lemma,
                                 verify_loeper_stability,
                                 verify_smoothing_lemma, wasserstein_entropic,
                                 wasserstein_exact, wasserstein_to_density)

from oracles import wasserstein_permutation_oracle


def random_measure(rng, n, dim, weighted=False):
    pts = rng.normal(size=(n, dim))
    if weighted:
        w = rng.random(n) + 0.1
        return DiscreteMeasure(pts, w / w.sum())
    return DiscreteMeasure.uniform(pts)


class TestExact:
    def test_identity_zero(self, rng):
        mu = random_measure(rng, 12, 3)
        val, plan = wasserstein_exact(mu, mu, p=2)
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_two_diracs(self):
        mu = DiscreteMeasure.uniform(np.array([[0.0, 0.0]]))
        nu = DiscreteMeasure.uniform(np.array([[3.0, 4.0]]))
        for p in (1, 2):
            val, _ = wasserstein_exact(mu, nu, p=p)
            assert val == pytest.approx(5.0, rel=1e-14)

    @pytest.mark.parametrize("p", [1, 2])
    def test_matches_permutation_oracle(self, p, rng):
        for _ in range(10):
            n = int(rng.integers(2, 7))
            x = rng.normal(size=(n, 4))
            y = rng.normal(size=(n, 4))
            val, _ = wasserstein_exact(DiscreteMeasure.uniform(x),
                                       DiscreteMeasure.uniform(y), p=p)
            oracle = wasserstein_permutation_oracle(x, y, p)
            assert val == pytest.approx(oracle, abs=1e-12)

    def test_weighted_lp_path(self, rng):
        mu = random_measure(rng, 15, 2, weighted=True)
        nu = random_measure(rng, 9, 2, weighted=True)
        val, plan = wasserstein_exact(mu, nu, p=2)
        assert val > 0
        assert max(plan.residuals) <= 1e-9
        # plan cost consistent with the reported value
        assert plan.cost == pytest.approx(val ** 2, rel=1e-9)

    def test_size_overflow(self, rng):
        mu = random_measure(rng, 5000, 2)
        nu = random_measure(rng, 5000, 2, weighted=True)
        with pytest.raises(SizeOverflowError):
            wasserstein_exact(mu, nu, p=2)

    def test_plan_marginals(self, rng):
        mu = random_measure(rng, 8, 2, weighted=True)
        nu = random_measure(rng, 11, 2, weighted=True)
        _, plan = wasserstein_exact(mu, nu, p=1)
        dense = plan.plan.toarray()
        np.testing.assert_allclose(dense.sum(1), mu.weights, atol=1e-9)
        np.testing.assert_allclose(dense.sum(0), nu.weights, atol=1e-9)


class TestEntropic:
    def test_identity_small_bias(self, rng):
        mu = random_measure(rng, 60, 2)
        res = wasserstein_entropic(mu, mu, p=2, eps_rel=0.01)
        assert res.value < 0.05
        res2 = wasserstein_entropic(mu, mu, p=2, eps_rel=0.0025)
        assert res2.value <= res.value + 1e-9

    def test_within_two_percent_of_exact(self, rng):
        for n, seed in ((300, 0), (500, 1)):
            g = np.random.default_rng(seed)
            mu = DiscreteMeasure.uniform(g.normal(size=(n, 2)))
            nu = DiscreteMeasure.uniform(g.normal(size=(n, 2)) + 0.4)
            exact, _ = wasserstein_exact(mu, nu, p=2)
            res = wasserstein_entropic(mu, nu, p=2, eps_rel=0.01)
            assert abs(res.value - exact) / exact < 0.02
            assert res.lower <= exact * (1 + 1e-9)
            assert res.upper >= exact * (1 - 1e-9)

    def test_error_shrinks_with_eps(self, rng):
        g = np.random.default_rng(5)
        mu = DiscreteMeasure.uniform(g.normal(size=(400, 2)))
        nu = DiscreteMeasure.uniform(g.normal(size=(400, 2)) * 1.3 + 0.2)
        exact, _ = wasserstein_exact(mu, nu, p=2)
        errs = [abs(wasserstein_entropic(mu, nu, p=2, eps_rel=e).value - exact)
                for e in (0.04, 0.01, 0.0025)]
        assert errs[2] <= errs[0] + 1e-12
        assert errs[2] <= errs[1] * 1.5 + 1e-12

    def test_bracket_orders(self, rng):
        mu = random_measure(rng, 200, 3)
        nu = random_measure(rng, 150, 3, weighted=True)
        res = wasserstein_entropic(mu, nu, p=2)
        assert res.lower <= res.value <= res.upper + 1e-12


class TestGroundMetric:
    def test_anisotropic_formula(self):
        g = GroundMetric(kind="anisotropic", w_q=2.0, d_q=2)
        x = np.array([[1.0, 0.0, 0.0, 0.0]])
        y = np.zeros((1, 4))
        assert g.distance(x, y)[0] == pytest.approx(2.0)
        x2 = np.array([[0.0, 0.0, 1.0, 0.0]])
        assert g.distance(x2, y)[0] == pytest.approx(1.0)
        x3 = np.array([[1.0, 0.0, 1.0, 0.0]])
        assert g.distance(x3, y)[0] == pytest.approx(np.sqrt(5.0))

    def test_for_cutoff_weight(self):
        assert GroundMetric.for_cutoff(1.0, 2).w_q == 1.0
        assert GroundMetric.for_cutoff(np.exp(-4.0), 2).w_q == pytest.approx(2.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 5.0))
    def test_metric_axioms(self, seed, w_q):
        g = np.random.default_rng(seed)
        metric = GroundMetric(kind="anisotropic", w_q=w_q, d_q=2)
        x, y, z = g.normal(size=(3, 4))
        dxy = metric.distance(x[None], y[None])[0]
        dyx = metric.distance(y[None], x[None])[0]
        dxz = metric.distance(x[None], z[None])[0]
        dzy = metric.distance(z[None], y[None])[0]
        assert dxy >= 0
        assert dxy == pytest.approx(dyx, rel=1e-12)
        assert dxy <= dxz + dzy + 1e-12
        assert metric.distance(x[None], x[None])[0] == 0.0


class TestModifiedDistance:
    def test_r_one_reduces_to_plain(self, rng):
        mu = random_measure(rng, 20, 4)
        nu = random_measure(rng, 20, 4)
        out = modified_distance(mu, nu, r=1.0, d=2)
        assert out.raw_wn2 == pytest.approx(out.w2, rel=1e-12)

    def test_p_only_difference(self, rng):
        # q-components far apart, p differences small: every optimal plan
        # keeps mass at its q, so the q-block of the metric never engages
        q = rng.normal(size=(15, 2)) * 10.0
        p1 = rng.normal(size=(15, 2)) * 0.1
        p2 = rng.normal(size=(15, 2)) * 0.1
        mu = DiscreteMeasure.uniform(np.concatenate([q, p1], axis=1))
        nu = DiscreteMeasure.uniform(np.concatenate([q, p2], axis=1))
        out = modified_distance(mu, nu, r=np.exp(-4.0), d=2)
        assert out.raw_wn2 == pytest.approx(out.w2, rel=1e-9)

    def test_sandwich_random(self, rng):
        for _ in range(5):
            mu = random_measure(rng, 18, 4)
            nu = random_measure(rng, 18, 4)
            out = modified_distance(mu, nu, r=np.exp(-4.0), d=2)
            assert out.w2 - 1e-9 <= out.raw_wn2 <= 2.0 * out.w2 + 1e-9

    def test_value_capped(self, rng):
        mu = random_measure(rng, 10, 4)
        nu = DiscreteMeasure.uniform(rng.normal(size=(10, 4)) + 50.0)
        out = modified_distance(mu, nu, r=0.1, d=2)
        assert out.value == 1.0

    def test_invalid_r(self, rng):
        mu = random_measure(rng, 5, 4)
        with pytest.raises(ValueError):
            modified_distance(mu, mu, r=1.5, d=2)


class TestDualityAndDbl:
    def test_kantorovich_duality_small(self, rng):
        for _ in range(5):
            mu = random_measure(rng, 12, 2, weighted=True)
            nu = random_measure(rng, 14, 2, weighted=True)
            rep = kantorovich_dual_check(mu, nu, p=1)
            assert rep["gap"] < 1e-6
            assert rep["feasibility_violation"] < 1e-9
            assert rep["extension"] == pytest.approx(rep["primal"], abs=1e-6)

    def test_dbl_below_w1(self, rng):
        for _ in range(5):
            mu = random_measure(rng, 15, 2, weighted=True)
            nu = random_measure(rng, 15, 2, weighted=True)
            w1, _ = wasserstein_exact(mu, nu, p=1)
            dbl = bounded_lipschitz(mu, nu)
            assert dbl <= w1 + 1e-9

    def test_dbl_identity(self, rng):
        mu = random_measure(rng, 10, 2)
        assert bounded_lipschitz(mu, mu) == pytest.approx(0.0, abs=1e-9)


class TestSmoothingLemma:
    @pytest.fixture(scope="class")
    def ff(self):
        return build_form_factor(2)

    def test_single_dirac(self, ff):
        nu = DiscreteMeasure.uniform(np.zeros((1, 2)))
        rescaled = ff.rescale(0.3)
        smeared = smear_measure(nu, rescaled, s=64)
        assert np.all(np.linalg.norm(smeared.points, axis=1) <= 0.3)
        rep = verify_smoothing_lemma(nu, nu, rescaled, p=2, s=64)
        assert rep["inequality_i"]
        assert rep["w_smear_vs_raw"] <= 0.3

    def test_identical_measures(self, ff, rng):
        nu = random_measure(rng, 20, 2)
        rep = verify_smoothing_lemma(nu, nu, ff.rescale(0.2), p=2, s=32)
        assert rep["contraction_lhs"] == pytest.approx(0.0, abs=1e-12)
        assert rep["inequality_ii"]

    def test_random_pair(self, ff, rng):
        nu = random_measure(rng, 30, 2)
        mu = random_measure(rng, 30, 2)
        rep = verify_smoothing_lemma(nu, mu, ff.rescale(0.1), p=2, s=64)
        assert rep["inequality_i"] and rep["inequality_ii"]
        # shared template: inequalities hold strictly, no violation allowance
        assert rep["violation_i"] == 0.0 and rep["violation_ii"] == 0.0
        assert 0.0 < rep["slack_rel"] < 0.1

    def test_template_slack_halves(self, ff):
        s64 = template_slack(ff, 64)
        s256 = template_slack(ff, 256)
        assert s256 <= 0.5 * s64

    def test_template_mass_center(self, ff):
        tpl = subatom_template(ff, 64)
        assert np.linalg.norm(tpl.mean(axis=0)) < 0.02
        assert np.all(np.linalg.norm(tpl, axis=1) <= ff.edge)


class TestDensityBoundLemma:
    @pytest.fixture(scope="class")
    def setup(self):
        ff2 = build_form_factor(2)
        rng = np.random.default_rng(11)
        spec = GridSpec.centered(1.5, 48, 2)
        pts = rng.normal(size=(3000, 2)) * 0.4
        pts = pts[np.linalg.norm(pts, axis=1) < 1.2]
        w = np.full(len(pts), 1.0 / len(pts))
        rho2 = deposit((pts, w), ff2.rescale(0.3), spec)
        return ff2, rho2

    def test_constants(self):
        from vlasovlab.formfactor import unit_ball_volume
        assert 2 ** 2 * unit_ball_volume(2) == pytest.approx(4 * np.pi)
        assert 2 ** 3 * unit_ball_volume(3) == pytest.approx(32 * np.pi / 3)

    def test_random_instance(self, setup, rng):
        ff2, rho2 = setup
        rho1 = DiscreteMeasure.uniform(rng.normal(size=(120, 2)) * 0.4)
        rep = verify_density_bound_lemma(rho1, rho2, ff2.rescale(0.3), p=2)
        assert rep["holds"]
        assert rep["ball2_volume"] == pytest.approx(4 * np.pi)

    def test_adversarial_cluster(self, setup, rng):
        # tight cluster far from the reference: the W term dominates
        ff2, rho2 = setup
        pts = rng.normal(size=(80, 2)) * 0.01 + np.array([1.0, 1.0])
        rho1 = DiscreteMeasure.uniform(pts)
        rep = verify_density_bound_lemma(rho1, rho2, ff2.rescale(0.1), p=2)
        assert rep["holds"]
        w_term = rep["r"] ** -(2 + 2) * rep["wp_lower"] ** 2
        assert w_term > rep["ball2_volume"] * rep["rho2_inf"]


def make_smooth_field(rng, n=128, half=1.6, modes=2):
    spec = GridSpec.centered(half, n, 2)
    xs = spec.origin[0] + (np.arange(n) + 0.5) * spec.h
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = np.ones_like(X)
    for _ in range(modes):
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        s = rng.uniform(0.25, 0.5)
        vals += np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    vals *= np.exp(-(X ** 2 + Y ** 2) / 1.5)
    vals /= vals.sum() * spec.h ** 2
    return DensityField(values=vals, origin=spec.origin, h=spec.h)


class TestLoeper:
    def test_identity(self, rng):
        f1 = make_smooth_field(rng)
        rep = verify_loeper_stability(f1, f1, CoulombKernel(d=2, sigma=1))
        assert rep["lhs_l2"] == pytest.approx(0.0, abs=1e-12)
        assert rep["holds"]

    def test_translated_pair_small_shift(self, rng):
        base = make_smooth_field(np.random.default_rng(3))
        for shift_cells in (1, 2):
            vals = np.roll(base.values, shift_cells, axis=0)
            f2 = DensityField(values=vals, origin=base.origin, h=base.h)
            rep = verify_loeper_stability(base, f2, CoulombKernel(d=2, sigma=1))
            assert rep["holds"]
            assert rep["lhs_l2"] > 0

    def test_random_smooth_pair(self):
        rng = np.random.default_rng(17)
        f1 = make_smooth_field(rng)
        f2 = make_smooth_field(rng)
        rep = verify_loeper_stability(f1, f2, CoulombKernel(d=2, sigma=1))
        assert rep["holds"]
        assert rep["margin"] >= 0


class TestToDensity:
    def test_exact_path_small(self, rng):
        from vlasovlab.measures import WeightedDensity
        mu = random_measure(rng, 50, 4)
        pts = rng.normal(size=(50, 4))
        wd = WeightedDensity(pts, np.full(50, 0.02), d=2)
        val, meta = wasserstein_to_density(mu, wd, p=2)
        assert meta["method"] == "exact"
        direct, _ = wasserstein_exact(mu, wd.as_measure(), p=2)
        assert val == pytest.approx(direct, rel=1e-12)

    def test_entropic_path_large(self, rng):
        mu = random_measure(rng, 900, 2)
        nu = random_measure(rng, 2600, 2, weighted=True)
        val, meta = wasserstein_to_density(mu, nu, p=2)
        assert meta["method"] == "entropic"
        assert val > 0
