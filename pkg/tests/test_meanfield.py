import numpy as np
import pytest

from vlasovlab.dynamics import IntegratorConfig, MemorySink, ParticleEnsemble, run
from vlasovlab.formfactor import build_form_factor
from vlasovlab.kernels import CoulombKernel, build_smeared_kernel, coulomb_eval
from vlasovlab.measures import DiscreteMeasure, WeightedDensity
from vlasovlab.meanfield import (GridSpec, SupportOverflowError, deposit,
                                 density_bound_monitor, discretize, evolve,
                                 field_force, from_ensemble, support_diagnostics,
                                 to_ensemble)
from vlasovlab.profiles import gaussian_truncated, uniform_ball


@pytest.fixture(scope="module")
def ff2m():
    return build_form_factor(2)


@pytest.fixture(scope="module")
def kernels2(ff2m):
    cfg = CoulombKernel(d=2, sigma=1)
    ff = ff2m.rescale(0.2)
    return (build_smeared_kernel(cfg, ff, smear=2),
            build_smeared_kernel(cfg, ff, smear=1), ff)


class TestDiscretize:
    def test_uniform_grid_mode_equal_weights(self):
        prof = uniform_ball(d=2)
        wd = discretize(prof, 4096, mode="grid-quadrature")
        assert np.allclose(wd.weights, wd.weights[0])
        assert abs(wd.weights.sum() - 1.0) < 1e-12
        assert wd.m <= 4096

    def test_iid_mode_reproducible(self):
        prof = uniform_ball(d=2)
        a = discretize(prof, 500, mode="iid-sample", seed=42)
        b = discretize(prof, 500, mode="iid-sample", seed=42)
        np.testing.assert_array_equal(a.points, b.points)
        assert np.all(a.weights == 1.0 / 500)

    def test_grid_mode_self_convergence(self):
        # first-order quadrature: consecutive per-axis refinements 2x halve
        # W_2 between successive discretizations (M -> 16M in the
        # 4-dimensional phase space halves the cell size)
        from vlasovlab.transport import wasserstein_entropic
        prof = gaussian_truncated(d=2, sigma_q=0.4, sigma_p=0.4, cutoff=2.0)
        levels = [discretize(prof, m ** 4, mode="grid-quadrature")
                  for m in (4, 8, 16)]
        d1 = wasserstein_entropic(levels[0].as_measure(),
                                  levels[1].as_measure(), p=2,
                                  eps_rel=0.005).value
        d2 = wasserstein_entropic(levels[1].as_measure(),
                                  levels[2].as_measure(), p=2,
                                  eps_rel=0.005).value
        assert d2 / d1 == pytest.approx(0.5, abs=0.17)

    def test_empty_support_error(self):
        prof = uniform_ball(d=2)
        with pytest.raises(ValueError):
            discretize(prof, 0)


class TestDeposit:
    def test_single_point_mass_and_bound(self, ff2m):
        # fine enough that the stencil renormalization is a no-op at 1e-10
        r = 0.4
        ff = ff2m.rescale(r)
        spec = GridSpec.centered(2 * r, 256, 2)  # h = r/64, subsampled x4
        field = deposit((np.zeros((1, 2)), np.array([1.0])), ff, spec)
        assert abs(field.total_mass - 1.0) < 1e-10
        assert field.max_value <= r ** -2 * (1 + 1e-10)

    def test_two_coincident_points_linear(self, ff2m):
        r = 0.3
        ff = ff2m.rescale(r)
        spec = GridSpec.centered(1.0, 64, 2)
        one = deposit((np.zeros((1, 2)), np.array([1.0])), ff, spec)
        two = deposit((np.zeros((2, 2)), np.array([0.5, 0.5])), ff, spec)
        np.testing.assert_allclose(two.values, one.values, rtol=1e-12, atol=1e-12)

    def test_numba_and_numpy_paths_agree(self, ff2m, rng):
        from vlasovlab import meanfield
        if not meanfield.HAVE_NUMBA:
            pytest.skip("numba unavailable")
        r = 0.25
        ff = ff2m.rescale(r)
        spec = GridSpec.centered(1.5, 96, 2)
        pts = rng.normal(size=(40, 2)) * 0.3
        w = rng.random(40)
        w /= w.sum()
        grid_np = np.zeros(spec.shape)
        meanfield._deposit_numpy(pts, w, grid_np, spec, ff, 4, 1.0)
        field_jit = deposit((pts, w), ff, spec)
        np.testing.assert_allclose(field_jit.values, grid_np, rtol=1e-10,
                                   atol=1e-12)

    def test_mass_conservation_random_cloud(self, ff2m, rng):
        ff = ff2m.rescale(0.15)
        spec = GridSpec.centered(1.5, 128, 2)
        pts = rng.normal(size=(500, 2)) * 0.3
        w = rng.random(500)
        w /= w.sum()
        field = deposit((pts, w), ff, spec)
        assert abs(field.total_mass - 1.0) < 1e-10

    def test_law_of_large_numbers_max(self, ff2m, rng):
        # uniform cloud: smeared max converges to the density sup
        prof = uniform_ball(d=2)
        ff = ff2m.rescale(0.25)
        spec = GridSpec.centered(1.6, 96, 2)
        maxima = []
        for n in (10_000, 100_000):
            q, _ = prof.sample(rng, n)
            field = deposit((q, np.full(n, 1.0 / n)), ff, spec)
            maxima.append(field.max_value)
        target = 1.0 / np.pi  # uniform disc density
        assert abs(maxima[1] - target) < 3.0 / np.sqrt(100_000 * 0.25 ** 2)
        assert abs(maxima[1] - target) <= abs(maxima[0] - target) + 0.02

    def test_support_overflow_names_point(self, ff2m):
        ff = ff2m.rescale(0.3)
        spec = GridSpec.centered(0.5, 32, 2)
        with pytest.raises(SupportOverflowError) as exc:
            deposit((np.array([[0.45, 0.0]]), np.array([1.0])), ff, spec)
        assert exc.value.point.shape == (2,)


class TestFieldForce:
    def test_symmetric_field_zero_at_center(self, ff2m, kernels2):
        _, k1, ff = kernels2
        spec = GridSpec.centered(1.0, 64, 2)
        field = deposit((np.zeros((1, 2)), np.array([1.0])), ff, spec)
        force = field_force(field, k1, query_points=np.zeros((1, 2)))
        assert np.linalg.norm(force[0]) < 1e-8

    def test_distant_cell_coulomb(self, ff2m, kernels2):
        _, k1, ff = kernels2
        spec = GridSpec.centered(1.0, 64, 2)
        field = deposit((np.array([[0.7, 0.7]]), np.array([1.0])), ff, spec)
        query = np.array([[-0.9, -0.9]])
        force = field_force(field, k1, query_points=query)
        # far field: unit point charge at the deposit barycenter
        expected = coulomb_eval(CoulombKernel(d=2, sigma=1),
                                query[0] - np.array([0.7, 0.7]))
        np.testing.assert_allclose(force[0], expected, rtol=5e-3)

    def test_direct_vs_fft_paths(self, ff2m, kernels2, rng):
        _, k1, ff = kernels2
        spec = GridSpec.centered(1.2, 48, 2)
        pts = rng.normal(size=(60, 2)) * 0.3
        w = rng.random(60)
        w /= w.sum()
        field = deposit((pts, w), ff, spec)
        centers = field.cell_centers()
        probe = centers[:: 97]
        f_fft = field_force(field, k1, query_points=probe)
        f_dir = field_force(field, k1, query_points=probe, path="direct")
        assert np.abs(f_fft - f_dir).max() <= 1e-6

    def test_factoring_agreement(self, ff2m):
        # single-smear kernel against chi-deposited density vs double-smear
        # kernel against the raw binned density: same continuous object, two
        # factorings; atoms pinned to cell centers, point-sampled deposit
        r = 0.3
        cfg = CoulombKernel(d=2, sigma=1)
        ff = ff2m.rescale(r)
        k1 = build_smeared_kernel(cfg, ff, smear=1)
        k2 = build_smeared_kernel(cfg, ff, smear=2)
        spec = GridSpec.centered(0.96, 410, 2)
        centers = spec.origin + 0.5 * spec.h \
            + np.stack(np.meshgrid(np.arange(410), np.arange(410),
                                   indexing="ij"), -1).reshape(-1, 2) * spec.h
        inner = centers[np.linalg.norm(centers, axis=1) < 0.25]
        atoms = inner[:: 37]
        w = np.full(len(atoms), 1.0 / len(atoms))
        probe = np.array([[0.0, 0.0], [0.2, 0.1], [-0.35, 0.3], [0.55, -0.2]])
        smeared = deposit((atoms, w), ff, spec, supersample=1)
        raw = deposit((atoms, w), None, spec)
        f_single = field_force(smeared, k1, query_points=probe)
        f_double = field_force(raw, k2, query_points=probe)
        assert np.abs(f_single - f_double).max() <= 1e-6


class TestEvolve:
    def _disc_density(self, rng, m=128, spread=0.4):
        q = rng.normal(size=(m, 2)) * spread
        p = rng.normal(size=(m, 2)) * 0.3
        return WeightedDensity(np.concatenate([q, p], axis=1),
                               np.full(m, 1.0 / m), d=2)

    def test_symmetric_center_free_transport(self, kernels2, rng):
        k2, _, ff = kernels2
        m = 40
        half = rng.normal(size=(m, 2)) * 0.3
        q = np.concatenate([half, -half, np.zeros((1, 2))])
        p = np.zeros_like(q)
        wd = WeightedDensity(np.concatenate([q, p], axis=1),
                             np.full(2 * m + 1, 1.0 / (2 * m + 1)), d=2)
        cfg = IntegratorConfig(dt=0.01, t_end=0.2, record_stride=20)
        traj = evolve(wd, ff, k2, cfg, mode="direct")
        center = traj.states[-1].q[-1]
        assert np.linalg.norm(center) < 1e-12

    def test_matches_dynamics_module(self, kernels2, rng):
        # equal-weight quadrature initialized at a microscopic state follows
        # the same trajectory as the dynamics module
        k2, _, ff = kernels2
        n = 64
        ens = ParticleEnsemble(rng.normal(size=(n, 2)) * 0.4,
                               rng.normal(size=(n, 2)) * 0.3)
        cfg = IntegratorConfig(dt=0.01, t_end=0.5, record_stride=10)
        sink = run(ens, k2, cfg)
        traj = evolve(from_ensemble(ens), ff, k2, cfg, mode="direct")
        for (qd, pd), st in zip(sink.snapshots, traj.states):
            np.testing.assert_allclose(st.q, qd, atol=1e-8)
            np.testing.assert_allclose(st.p, pd, atol=1e-8)

    def test_time_reversal(self, kernels2, rng):
        k2, _, ff = kernels2
        wd = self._disc_density(rng)
        cfg = IntegratorConfig(dt=0.01, t_end=0.3, record_stride=30)
        fwd = evolve(wd, ff, k2, cfg, mode="direct")
        end = fwd.states[-1]
        flipped = WeightedDensity(
            np.concatenate([end.q, -end.p], axis=1), end.weights, d=2)
        back = evolve(flipped, ff, k2, cfg, mode="direct")
        np.testing.assert_allclose(back.states[-1].q, wd.q, atol=1e-6)
        np.testing.assert_allclose(back.states[-1].p, -wd.p, atol=1e-6)

    def test_weights_constant_pushforward(self, kernels2, rng):
        k2, _, ff = kernels2
        wd = self._disc_density(rng, m=64)
        cfg = IntegratorConfig(dt=0.02, t_end=0.2, record_stride=5)
        traj = evolve(wd, ff, k2, cfg, mode="direct")
        for st in traj.states:
            np.testing.assert_array_equal(st.weights, wd.weights)
        # pushforward law: integrating any test function against the evolved
        # measure IS the sum over flowed initial points (identical arrays)
        for _ in range(10):
            a = rng.normal(size=4)
            b = rng.normal()
            phi = lambda x: np.tanh(x @ a + b)
            lhs = (traj.states[-1].weights * phi(traj.states[-1].points)).sum()
            rhs = (wd.weights * phi(traj.states[-1].points)).sum()
            assert lhs == rhs

    def test_grid_mode_tracks_direct(self, kernels2, rng):
        k2, k1, ff = kernels2
        wd = self._disc_density(rng, m=256, spread=0.3)
        cfg = IntegratorConfig(dt=0.02, t_end=0.3, record_stride=15)
        direct = evolve(wd, ff, k2, cfg, mode="direct")
        spec = GridSpec.centered(2.0, 192, 2)
        gridded = evolve(wd, ff, k2, cfg, mode="grid", kern_single=k1,
                         grid=spec)
        dq = np.abs(gridded.states[-1].q - direct.states[-1].q).max()
        assert dq < 5e-3

    def test_grid_refinement_convergence(self, kernels2, rng):
        from vlasovlab.transport import wasserstein_exact
        k2, k1, ff = kernels2
        wd = self._disc_density(rng, m=128, spread=0.3)
        cfg = IntegratorConfig(dt=0.02, t_end=0.3, record_stride=15)
        ends = []
        for n in (48, 96, 192):
            spec = GridSpec.centered(2.0, n, 2)
            traj = evolve(wd, ff, k2, cfg, mode="grid", kern_single=k1,
                          grid=spec)
            ends.append(traj.states[-1])
        w_coarse, _ = wasserstein_exact(ends[0].as_measure(),
                                        ends[1].as_measure(), p=2)
        w_fine, _ = wasserstein_exact(ends[1].as_measure(),
                                      ends[2].as_measure(), p=2)
        assert w_fine / w_coarse <= 0.6

    def test_tracers_advected(self, kernels2, rng):
        k2, _, ff = kernels2
        wd = self._disc_density(rng, m=64)
        tracers = wd.points[:8].copy()
        cfg = IntegratorConfig(dt=0.02, t_end=0.2, record_stride=10)
        traj = evolve(wd, ff, k2, cfg, mode="direct", tracers=tracers)
        # tracers coincident with source atoms follow them exactly
        np.testing.assert_allclose(traj.tracers[-1],
                                   traj.states[-1].points[:8], atol=1e-12)


class TestDiagnostics:
    def test_free_transport_support(self):
        # no field: D(t) = D(0) + int R, R constant
        m = 32
        rng = np.random.default_rng(3)
        q = rng.normal(size=(m, 2)) * 0.2
        p = rng.normal(size=(m, 2))
        times = np.linspace(0.0, 1.0, 6)
        states = [WeightedDensity(np.concatenate([q + t * p, p], axis=1),
                                  np.full(m, 1.0 / m), d=2) for t in times]
        from vlasovlab.meanfield import MeanfieldTrajectory
        traj = MeanfieldTrajectory(times=list(times), states=states,
                                   tracers=None, mode="direct", dt=0.2)
        diag, report = support_diagnostics(traj)
        assert np.allclose(np.diff(diag.r_series), 0.0)
        # straight-line growth: slack of the position inequality stays <= 0
        assert report["position_slack_max"] <= 1e-9

    def test_repulsive_blob_momentum_grows(self, kernels2, rng):
        k2, _, ff = kernels2
        m = 128
        q = rng.normal(size=(m, 2)) * 0.2
        wd = WeightedDensity(
            np.concatenate([q, np.zeros_like(q)], axis=1),
            np.full(m, 1.0 / m), d=2)
        cfg = IntegratorConfig(dt=0.02, t_end=0.5, record_stride=5)
        traj = evolve(wd, ff, k2, cfg, mode="direct")
        diag, report = support_diagnostics(traj, profile=uniform_ball(d=2))
        assert report["momentum_nondecreasing"]
        assert np.isfinite(report["fitted_C"])

    def test_fitted_constant_stable_under_dt(self, kernels2, rng):
        k2, _, ff = kernels2
        wd = WeightedDensity(
            np.concatenate([rng.normal(size=(96, 2)) * 0.25,
                            rng.normal(size=(96, 2)) * 0.2], axis=1),
            np.full(96, 1.0 / 96), d=2)
        cs = []
        for dt in (0.02, 0.01):
            cfg = IntegratorConfig(dt=dt, t_end=0.4,
                                   record_stride=max(1, int(0.1 / dt)))
            traj = evolve(wd, ff, k2, cfg, mode="direct")
            _, report = support_diagnostics(traj, profile=uniform_ball(d=2))
            cs.append(report["fitted_C"])
        assert cs[1] == pytest.approx(cs[0], rel=0.1)

    def test_density_bound_monitor(self, kernels2, rng):
        k2, _, ff = kernels2
        wd = WeightedDensity(
            np.concatenate([rng.normal(size=(128, 2)) * 0.3,
                            rng.normal(size=(128, 2)) * 0.2], axis=1),
            np.full(128, 1.0 / 128), d=2)
        cfg = IntegratorConfig(dt=0.02, t_end=0.2, record_stride=5)
        traj = evolve(wd, ff, k2, cfg, mode="direct")
        report = density_bound_monitor(traj, ff, c0=1e9)
        assert len(report["rho_inf"]) == len(traj.times)
        assert report["violations"] == []
        assert all(np.isfinite(v) for v in report["rho_inf"])


class TestConversions:
    def test_roundtrip(self, rng):
        ens = ParticleEnsemble(rng.normal(size=(10, 2)),
                               rng.normal(size=(10, 2)))
        wd = from_ensemble(ens)
        back = to_ensemble(wd)
        np.testing.assert_array_equal(back.q, ens.q)
        np.testing.assert_array_equal(back.p, ens.p)

    def test_unequal_weights_rejected(self, rng):
        w = np.array([0.25, 0.75])
        wd = WeightedDensity(rng.normal(size=(2, 4)), w, d=2)
        with pytest.raises(ValueError):
            to_ensemble(wd)
