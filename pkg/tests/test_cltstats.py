import numpy as np
import pytest

from tnl import spectral as sp
from tnl.cltstats import (RateEstimate, RateRow, fit_slope, gaussianity_report, run_rate_experiment,
                          theoretical_exponent, wasserstein_coupling_bound)
from tnl.detpde import DriftSpec

from oracles import LINE_EXPONENTS


class TestExponent:
    def test_transport_clt(self):
        assert theoretical_exponent("transport_CLT", 0.5) == pytest.approx(LINE_EXPONENTS["transport_CLT"])

    def test_euler_hminus1(self):
        assert theoretical_exponent("euler_CLT_Hminus1", 0.5) == pytest.approx(LINE_EXPONENTS["euler_CLT_Hminus1"])

    def test_transport_lln(self):
        assert theoretical_exponent("transport_LLN", 0.5, param=1.0) == pytest.approx(LINE_EXPONENTS["transport_LLN"])

    def test_euler_clt_symmetric_in_beta(self):
        a = theoretical_exponent("euler_CLT", 0.5, param=0.1)
        b = theoretical_exponent("euler_CLT", 0.5, param=0.4)
        assert a == pytest.approx(b)

    @pytest.mark.parametrize("args", [("transport_CLT", 1.0), ("transport_CLT", 0.5, 1.0),
                                      ("transport_CLT", 0.5, 0.0, 0.6), ("euler_CLT", 0.5, 0.0, 0.5),
                                      ("transport_LLN", 0.5, 0.0, 1.5), ("bogus", 0.5)])
    def test_domain_errors(self, args):
        with pytest.raises(ValueError):
            theoretical_exponent(*args)


class TestFitSlope:
    def test_exact_power_law(self):
        n = np.array([4, 8, 16, 32])
        fit = fit_slope(n, 3.0 * n**-1.25)
        assert fit.slope == pytest.approx(-1.25, abs=1e-12)
        assert fit.ci[1] - fit.ci[0] < 1e-9

    def test_two_points_residual_ci_infinite(self):
        fit = fit_slope([4, 8], [1.0, 0.5], [0.01, 0.01])
        assert fit.ci == (-np.inf, np.inf)
        assert np.isfinite(fit.ci_mc).all()

    def test_mc_interval_shrinks(self):
        x, y = [4, 8, 16], [1.0, 0.5, 0.25]
        wide = fit_slope(x, y, [0.04] * 3).ci_mc
        narrow = fit_slope(x, y, [0.01] * 3).ci_mc
        assert narrow[1] - narrow[0] == pytest.approx((wide[1] - wide[0]) / 4)

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit_slope([4], [1.0])


def make_estimate():
    rows = [RateRow(4, 0.1, 1.0, 0.1, 32, 0, 0.9), RateRow(8, 0.05, 0.6, 0.05, 32, 1, 0.5)]
    return RateEstimate("transport_LLN", rows, -0.7, (-np.inf, np.inf), (-1.0, -0.4), -0.7, "n", 1.0,
                        "transport_LLN")


class TestRateEstimate:
    def test_decreasing(self):
        assert make_estimate().strictly_decreasing

    def test_exports(self, tmp_path):
        est = make_estimate()
        est.to_csv(tmp_path / "e.csv")
        est.to_gnuplot(tmp_path / "e.dat")
        text = est.to_json(tmp_path / "e.json")
        assert '"slope": -0.7' in text
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "n,epsilon,mean_sq_error,stderr,paths,aborted,final_mean"
        assert lines[2].startswith("8,0.05,0.6,")
        dat = (tmp_path / "e.dat").read_text().splitlines()
        assert dat[0].startswith("#") and dat[1] == "4.0 1.0"

    def test_rejects_single_path(self):
        with pytest.raises(ValueError):
            RateEstimate("x", [RateRow(4, 0.1, 1.0, 0.0, 1, 0, 1.0)], 0, (0, 0), (0, 0), 0, "n", None, None)


@pytest.fixture(scope="module")
def small_experiment():
    g = sp.get_grid(32)
    f0 = sp.SpectralField.random(g, np.random.default_rng(0), 1, 4, 1.0)
    f0 = f0 * (1 / sp.sobolev_norm(f0, 0.0))
    kw = dict(grid=g, T=0.05, s=1.0, init=f0, dt=1e-3, b=DriftSpec("shear"), seed=3,
              exponent=("transport_LLN", 1.0))
    return kw, run_rate_experiment("transport_LLN", 0.5, [4, 8], 32, **kw)


class TestRateExperiment:
    def test_direction(self, small_experiment):
        _, est = small_experiment
        assert est.means[1] < est.means[0]
        assert est.exponent == 1.0 and est.formula == "transport_LLN"

    def test_same_seed_same_csv(self, small_experiment, tmp_path):
        kw, est = small_experiment
        again = run_rate_experiment("transport_LLN", 0.5, [4, 8], 32, **kw)
        est.to_csv(tmp_path / "a.csv")
        again.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_adding_cutoffs_keeps_draws(self, small_experiment):
        kw, est = small_experiment
        one = run_rate_experiment("transport_LLN", 0.5, [8, 10], 32, **kw)
        assert np.array_equal(one.samples[8], est.samples[8])

    @pytest.mark.parametrize("n_list,paths", [([8, 4], 32), ([4, 8], 31), ([4, 11], 32)])
    def test_rejects(self, small_experiment, n_list, paths):
        kw, _ = small_experiment
        with pytest.raises(ValueError):
            run_rate_experiment("transport_LLN", 0.5, n_list, paths, **kw)

    def test_unknown_kind(self, small_experiment):
        kw, _ = small_experiment
        with pytest.raises(ValueError, match="unknown"):
            run_rate_experiment("heat_LLN", 0.5, [4, 8], 32, **kw)


class TestGaussianity:
    def test_normal_passes(self):
        rep = gaussianity_report(np.random.default_rng(0).standard_normal(10_000))
        assert rep.passed and abs(rep.excess_kurtosis) < 0.1

    def test_exponential_fails(self):
        rep = gaussianity_report(np.random.default_rng(0).exponential(size=10_000))
        assert not rep.passed and rep.excess_kurtosis > 1

    def test_constant_degenerate(self):
        rep = gaussianity_report(np.full(600, 2.0))
        assert rep.degenerate and not rep.passed

    def test_sample_floor(self):
        with pytest.raises(ValueError):
            gaussianity_report(np.zeros(499))


class TestWasserstein:
    def test_zero(self):
        assert wasserstein_coupling_bound(np.zeros(10)) == 0.0

    def test_sqrt_of_mean(self):
        assert wasserstein_coupling_bound([1.0, 3.0, np.nan]) == pytest.approx(np.sqrt(2.0))

    def test_matches_final_rate_mean(self):
        g = sp.get_grid(48)
        xi = sp.SpectralField.random(g, np.random.default_rng(1), 1, 4, 1.0)
        vals = []

        def keep(n, cp):
            vals.append(wasserstein_coupling_bound((cp, cp.meta["key"])))

        est = run_rate_experiment("euler_CLT", 0.5, [4, 8, 16], 32, g, 0.05, 1.0, xi, seed=2, on_run=keep)
        assert np.allclose(vals, np.sqrt([r.final_mean for r in est.rows]), rtol=1e-12)
        assert vals[0] > vals[1] > vals[2]
