import numpy as np
import pytest

from tnl import spectral as sp
from tnl.detpde import (DriftSpec, solve_advection_diffusion, solve_backward_dual, solve_nse_vorticity,
                        step_count)
from tnl.noise import build_noise_model
from tnl.spde import (StochasticRunConfig, dual_pairing, run_coupled, run_fluctuation_euler,
                      run_fluctuation_transport, run_stochastic_euler, run_stochastic_transport,
                      stochastic_convolution)
from tnl.spectral import SpectralField

from oracles import convolution_variance


def unit_field(grid, seed=0, k_hi=4):
    f = SpectralField.random(grid, np.random.default_rng(seed), 1, k_hi, 1.0)
    return f * (1.0 / sp.sobolev_norm(f, 0.0))


@pytest.fixture(scope="module")
def g32():
    return sp.get_grid(32)


class TestConfig:
    def test_noise_must_fit_grid(self, g32):
        with pytest.raises(ValueError, match="dealias"):
            StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 11))

    def test_save_points_include_end(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.025, build_noise_model(0.5, 4), stride=10)
        assert cfg.save_points() == [0, 10, 20, 25]

    def test_path_seed_length(self, g32):
        with pytest.raises(ValueError):
            StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), paths=2, path_seeds=(1,))


class TestStochasticTransport:
    def test_noise_off(self, g32):
        f0 = unit_field(g32)
        b = DriftSpec("shear")
        cfg = StochasticRunConfig(g32, 1e-3, 0.02, build_noise_model(0.5, 4), paths=3, stride=1, amplitude=0.0)
        tr = run_stochastic_transport(f0, b, cfg)
        ref = solve_advection_diffusion(f0, b, 0.02, 1e-3)
        assert np.abs(tr.fields - ref.fields[:, None]).max() < 1e-15

    def test_mean_is_the_limit(self, g32):
        f0 = unit_field(g32)
        b = DriftSpec("shear")
        T, dt, P = 0.02, 2e-4, 512
        cfg = StochasticRunConfig(g32, dt, T, build_noise_model(0.5, 4), seed=11, paths=P, stride=25)
        tr = run_stochastic_transport(f0, b, cfg)
        ref = solve_advection_diffusion(f0, b, T, dt, stride=25).fields
        dev = tr.fields - ref[:, None]
        w = g32.sobolev_weight(-1.0)
        for i in range(1, len(tr.times)):
            mean = dev[i].mean(axis=0)
            var = (np.abs(dev[i] - mean) ** 2).sum(axis=0) / (P - 1)
            se = np.sqrt((w * var).sum() / P)
            assert np.sqrt((w * np.abs(mean) ** 2).sum()) <= 3 * se
            # per mode on the lowest shells
            low = (g32.k_sq > 0) & (g32.k_sq <= 4)
            z = np.abs(mean[low]) / np.sqrt(var[low] / P)
            assert z.max() < 4.0

    @pytest.mark.xfail(strict=True, reason="with E|dB|^2 = dt the noise only supplies half of the explicit "
                                           "Laplacian, so the mean L2 norm decays instead of staying near 1")
    def test_l2_budget(self, g32):
        f0 = unit_field(g32)
        cfg = StochasticRunConfig(g32, 2e-4, 0.2, build_noise_model(0.5, 8), seed=0, paths=32, stride=1000)
        tr = run_stochastic_transport(f0, DriftSpec("shear"), cfg)
        ratio = sp.sobolev_norm_sq(g32, tr.fields[-1], 0.0).mean()
        assert 0.9 <= ratio <= 1.0

    def test_pathwise_budget_abort(self, g32):
        f0 = unit_field(g32)
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), paths=4, l2_tol=-0.5)
        tr = run_stochastic_transport(f0, DriftSpec("zero"), cfg)
        assert tr.meta["aborted"].all()
        assert np.isnan(tr.fields[-1]).all()

    def test_l2_never_grows_beyond_tolerance(self, g32):
        f0 = unit_field(g32)
        cfg = StochasticRunConfig(g32, 1e-3, 0.05, build_noise_model(0.5, 8), paths=16, stride=1)
        tr = run_stochastic_transport(f0, DriftSpec("shear"), cfg)
        norms = np.sqrt(sp.sobolev_norm_sq(g32, tr.fields, 0.0))
        assert np.nanmax(norms) <= 1.05
        assert tr.meta["aborted"].sum() == 0

    def test_replay_bitwise(self, g32):
        f0 = unit_field(g32)
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), seed=5, paths=3)
        a = run_stochastic_transport(f0, DriftSpec("shear"), cfg).fields
        b = run_stochastic_transport(f0, DriftSpec("shear"), cfg).fields
        assert np.array_equal(a, b)

    def test_chunking_invisible(self, g32):
        f0 = unit_field(g32)
        kw = dict(seed=5, paths=6)
        a = run_stochastic_transport(f0, DriftSpec("zero"),
                                     StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), chunk=6, **kw))
        b = run_stochastic_transport(f0, DriftSpec("zero"),
                                     StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), chunk=4, **kw))
        assert np.array_equal(a.fields, b.fields)


class TestStochasticEuler:
    def test_noise_off(self, g32):
        xi = unit_field(g32, 1)
        cfg = StochasticRunConfig(g32, 1e-3, 0.02, build_noise_model(0.5, 4), paths=2, stride=1, amplitude=0.0)
        tr = run_stochastic_euler(xi, cfg)
        assert np.abs(tr.fields - solve_nse_vorticity(xi, 0.02, 1e-3).fields[:, None]).max() < 1e-15

    def test_taylor_green_mean(self, g32):
        xi = sp.taylor_green(g32)
        T, dt, P = 0.01, 5e-4, 256
        cfg = StochasticRunConfig(g32, dt, T, build_noise_model(0.5, 8), seed=2, paths=P, stride=20)
        tr = run_stochastic_euler(xi, cfg)
        exact = np.exp(-8 * np.pi**2 * T) * xi.coeffs
        i = g32.mode_index(1, 1)
        x = tr.fields[-1][:, i[0], i[1]]
        assert abs(x.mean() - exact[i]) <= 3 * x.std(ddof=1) / np.sqrt(P)

    def test_mean_zero_preserved(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.02, build_noise_model(0.5, 8), paths=4, stride=1)
        tr = run_stochastic_euler(unit_field(g32, 2), cfg)
        assert np.all(tr.fields[:, :, 0, 0] == 0)

    def test_rejects_nonzero_mean(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4))
        with pytest.raises(ValueError):
            run_stochastic_euler(SpectralField.from_physical(g32, np.ones((32, 32))), cfg)


class TestFluctuations:
    def test_zero_limit(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), paths=2, stride=1)
        zero = solve_advection_diffusion(SpectralField.zeros(g32), DriftSpec("zero"), 0.01, 1e-3)
        assert np.all(run_fluctuation_transport(cfg, zero, DriftSpec("shear")).fields == 0)
        assert np.all(run_fluctuation_euler(cfg, zero).fields == 0)

    def test_limit_must_match_mesh(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4))
        fbar = solve_advection_diffusion(unit_field(g32), DriftSpec("zero"), 0.01, 1e-3, stride=2)
        with pytest.raises(ValueError, match="every step"):
            run_fluctuation_transport(cfg, fbar, DriftSpec("zero"))

    def test_euler_linear_in_noise(self, g32):
        xibar = solve_nse_vorticity(unit_field(g32, 3), 0.01, 1e-3)
        base = dict(grid=g32, dt=1e-3, T=0.01, noise=build_noise_model(0.5, 4), seed=4, paths=3, stride=1)
        one = run_fluctuation_euler(StochasticRunConfig(**base), xibar).fields
        two = run_fluctuation_euler(StochasticRunConfig(**base, amplitude=2.0), xibar).fields
        assert np.abs(two - 2 * one).max() <= 1e-13 * np.abs(one).max()

    def test_dual_representation(self, g32):
        """<X_T, phi> agrees with the weak (dual) form, the gap closing under dt refinement."""
        f0 = unit_field(g32)
        b = DriftSpec("shear")
        T = 0.02
        phi = sp.mode(g32, 1, 0)
        phi = SpectralField(g32, phi.coeffs + np.conj(sp.mode(g32, -1, 0).coeffs))
        gaps = []
        for dt in (4e-4, 2e-4, 1e-4):
            fbar = solve_advection_diffusion(f0, b, T, dt)
            cfg = StochasticRunConfig(g32, dt, T, build_noise_model(0.5, 4), seed=8, paths=8,
                                      stride=step_count(T, dt))
            X = run_fluctuation_transport(cfg, fbar, b).fields[-1]
            strong = sp.inner(X, phi.coeffs[None])
            duals = solve_backward_dual(phi, b, T, dt).fields
            weak = dual_pairing(fbar, duals, cfg)
            gaps.append(np.abs(strong - weak).max() / np.abs(strong).max())
        assert gaps[2] < gaps[1] < gaps[0]


def rough_field(grid, power=1.4):
    k2 = grid.k_sq
    c = np.where((k2 > 0) & (k2 <= grid.k_max**2), np.maximum(k2, 1) ** (-power / 2), 0.0)
    return SpectralField(grid, c.astype(complex))


class TestStochasticConvolution:
    def test_constant_coefficient(self):
        g = sp.get_grid(24)
        c = np.zeros((24, 24), complex)
        c[0, 0] = 3.0
        cfg = StochasticRunConfig(g, 1e-3, 0.01, build_noise_model(0.6, g.k_max), paths=2)
        assert np.all(stochastic_convolution(cfg, SpectralField(g, c)).fields == 0)

    def test_first_step_sign(self, g32):
        """With the state still zero the transport terms vanish, so one fluctuation step is -Z."""
        xibar = solve_nse_vorticity(unit_field(g32, 4), 1e-3, 1e-3)
        cfg = StochasticRunConfig(g32, 1e-3, 1e-3, build_noise_model(0.5, 4), seed=1, paths=3, stride=1)
        Z = stochastic_convolution(cfg, xibar).fields[-1]
        Xi = run_fluctuation_euler(cfg, xibar).fields[-1]
        assert np.abs(Xi + Z).max() <= 1e-15 * np.abs(Z).max()

    def test_frozen_field_equals_constant_trajectory(self):
        g = sp.get_grid(24)
        xi = rough_field(g)
        cfg = StochasticRunConfig(g, 1e-3, 0.005, build_noise_model(0.6, g.k_max), seed=2, paths=2, stride=1)
        from tnl.detpde import TrajectorySnapshot
        traj = TrajectorySnapshot(g, np.arange(6) * 1e-3, np.stack([xi.coeffs] * 6))
        a = stochastic_convolution(cfg, xi).fields
        b = stochastic_convolution(cfg, traj).fields
        assert np.array_equal(a, b)

    @pytest.mark.slow
    def test_mode_variance_quadrature(self):
        g = sp.get_grid(24)
        alpha, T, dt = 0.6, 0.01, 1e-4
        cfg = StochasticRunConfig(g, dt, T, build_noise_model(alpha, g.k_max), seed=3, paths=10_000,
                                  stride=step_count(T, dt), chunk=500)
        Z = stochastic_convolution(cfg, rough_field(g)).fields[-1]
        l1, l2, var = convolution_variance(g.k_max, alpha, lambda s: s ** -1.4, T, dt)
        lookup = {(a, b): v for a, b, v in zip(l1, l2, var)}
        for k in [(1, 0), (1, 1), (2, -1), (3, 2), (5, 0), (7, 3)]:
            i = g.mode_index(*k)
            mc = (np.abs(Z[:, i[0], i[1]]) ** 2).mean()
            assert mc == pytest.approx(lookup[k], rel=0.05)


class TestCoupled:
    def test_noise_off_all_errors_zero(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), paths=2, amplitude=0.0)
        for kind, b in (("transport", DriftSpec("shear")), ("euler", None)):
            cp = run_coupled(kind, cfg, unit_field(g32), b, s_values=(1.4,), track_martingale=True)
            for key, e in cp.errors.items():
                # the coupled limit is stepped separately, so only roundoff survives
                assert np.nanmax(e) < 1e-20, key

    def test_rejects_unknown_kind(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4))
        with pytest.raises(ValueError):
            run_coupled("burgers", cfg, unit_field(g32))

    def test_finite_field_matches_standalone_run(self, g32):
        f0 = unit_field(g32)
        b = DriftSpec("shear")
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), seed=3, paths=3)
        cp = run_coupled("transport", cfg, f0, b, keep="final")
        tr = run_stochastic_transport(f0, b, cfg)
        assert np.abs(cp.fields["finite"].fields[-1] - tr.fields[-1]).max() < 1e-14

    def test_fluctuation_matches_standalone_run(self, g32):
        f0 = unit_field(g32)
        b = DriftSpec("shear")
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), seed=3, paths=3)
        cp = run_coupled("transport", cfg, f0, b, keep="final")
        fbar = solve_advection_diffusion(f0, b, 0.01, 1e-3)
        X = run_fluctuation_transport(cfg, fbar, b).fields[-1]
        assert np.abs(cp.fields["fluct"].fields[-1] - X).max() < 1e-14

    def test_error_median_decreases_in_n(self):
        g = sp.get_grid(48)
        xi = unit_field(g, 5)
        med = []
        for n in (4, 8, 16):
            cfg = StochasticRunConfig(g, 1e-3, 0.05, build_noise_model(0.5, n), seed=7, paths=64)
            cp = run_coupled("euler", cfg, xi, s_values=(1.0,), keep="none")
            med.append(np.median(cp.errors["clt_s=1"][-1]))
        assert med[0] > med[1] > med[2]

    def test_martingale_bounded_in_n(self):
        g = sp.get_grid(48)
        f0 = unit_field(g, 6)
        vals = []
        for n in (4, 8, 16):
            cfg = StochasticRunConfig(g, 1e-3, 0.05, build_noise_model(0.5, n), seed=9, paths=32, stride=5)
            cp = run_coupled("transport", cfg, f0, DriftSpec("shear"), s_values=(), keep="none",
                             track_martingale=True, martingale_beta=3.0)
            vals.append(np.nanmax(cp.errors["martingale"], axis=0).mean())
        assert max(vals) / min(vals) < 3.0

    def test_abort_counted(self, g32):
        cfg = StochasticRunConfig(g32, 1e-3, 0.01, build_noise_model(0.5, 4), paths=4, l2_tol=-0.5)
        cp = run_coupled("transport", cfg, unit_field(g32), DriftSpec("zero"))
        assert cp.abort_count == 4 and cp.meta["aborted"] == 4
        assert np.isnan(cp.errors["lln"][-1]).all()
