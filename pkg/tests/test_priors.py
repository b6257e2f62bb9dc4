import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit, logit

from bym2.graph import Graph
from bym2.linalg import dense_pseudo_inverse
from bym2.priors import (GammaPrecPrior, PCPhiPrior, PCPrecPrior, PhiPriorTable, UniformPhiPrior,
                         gamma_prec_log_density, parse_phi_prior, parse_prec_prior,
                         pc_prec_log_density, pc_prec_theta, phi_distance, phi_distance_deriv,
                         phi_eigenvalues, phi_kld, phi_pc_lambda, uniform_phi_log_density)
from bym2.scaling import scale_structured

from conftest import random_connected_graph

P2_GT = np.array([0.0, 2.0])
# KLD(0.5) = -log(0.75)/2 on P2, so d(0.5) = sqrt(-log 0.75)
P2_D_HALF = np.sqrt(-np.log(0.75))
P2_LAMBDA = np.log(3.0) / P2_D_HALF  # 2.0482740...


def gamma_tilde(g):
    s = scale_structured(g)
    return phi_eigenvalues(s.q_star, s.null_dimension)


def logit_mass(table, upper=np.inf):
    """Prior mass of logit(phi) below ``upper`` by adaptive quadrature."""
    f = lambda x: np.exp(table.log_density_internal(x))
    lo = quad(f, -np.inf, min(upper, 0.0), limit=500)[0]
    if upper <= 0:
        return lo
    # the upper tail decays slowly; integrate over log(logit)
    top = np.log(upper) if np.isfinite(upper) else np.log(1e12)
    hi = quad(lambda u: f(np.exp(u)) * np.exp(u), -40, top, limit=500)[0]
    return lo + hi


class TestPrecision:
    def test_theta(self):
        assert pc_prec_theta(1, 0.01) == pytest.approx(np.log(100))
        with pytest.raises(ValueError):
            pc_prec_theta(0, 0.1)
        with pytest.raises(ValueError):
            pc_prec_theta(1, 1.0)

    def test_density_value(self):
        assert np.exp(pc_prec_log_density(1.0, 1.0)) == pytest.approx(0.5 * np.exp(-1), rel=1e-12)

    @pytest.mark.parametrize("theta", [0.5, 4.60517])
    def test_normalised(self, theta):
        # substitute sigma = tau^{-1/2}: density theta exp(-theta sigma)
        prior = PCPrecPrior(1.0, np.exp(-theta))
        assert prior.theta == pytest.approx(theta)
        f = lambda lt: np.exp(prior.log_density_internal(lt))
        assert quad(f, -np.inf, np.inf, limit=200)[0] == pytest.approx(1.0, abs=1e-6)

    def test_tail_probability(self):
        prior = PCPrecPrior(0.2 / 0.31, 0.1)
        f = lambda lt: np.exp(prior.log_density_internal(lt))
        # sigma > U  <=>  log tau < -2 log U
        p = quad(f, -np.inf, -2 * np.log(prior.U), epsabs=1e-12, limit=200)[0]
        assert p == pytest.approx(0.1, abs=1e-8)

    def test_gamma(self):
        assert np.exp(gamma_prec_log_density(0.0, 1.0, 0.01)) == pytest.approx(0.01)
        prior = GammaPrecPrior(1.0, 0.02)
        mean = quad(lambda t: t * np.exp(prior.log_density(t)), 0, np.inf)[0]
        assert mean == pytest.approx(50.0, rel=1e-6)
        assert prior.describe() == {"kind": "gamma", "shape": 1.0, "rate": 0.02}

    @pytest.mark.parametrize("prior", [PCPrecPrior(), GammaPrecPrior(2.0, 0.5)])
    def test_internal_jacobian(self, prior):
        for lt in (-3.0, 0.7, 6.0):
            assert prior.log_density_internal(lt) == pytest.approx(
                prior.log_density(np.exp(lt)) + lt, rel=1e-12)
        assert np.isfinite(prior.log_density_internal(-800.0))


class TestPhiDistance:
    def test_base_model(self):
        assert phi_distance(0.0, [0.0, 3.0, 0.5]) == 0.0

    def test_p2_values(self):
        assert phi_kld(0.5, P2_GT) == pytest.approx(-0.5 * np.log(0.75), rel=1e-12)
        assert phi_distance(0.5, P2_GT) == pytest.approx(P2_D_HALF, rel=1e-12)

    def test_derivative(self, rng):
        gt = np.concatenate([[0.0], rng.uniform(0.1, 3, 10)])
        h = 1e-6
        for phi in (1e-4, 0.3, 0.9):
            fd = (phi_distance(phi + h, gt) - phi_distance(phi - h, gt)) / (2 * h)
            assert phi_distance_deriv(phi, gt) == pytest.approx(fd, rel=1e-5)
        # finite right-derivative at zero
        fd0 = phi_distance(1e-7, gt) / 1e-7
        assert phi_distance_deriv(0.0, gt) == pytest.approx(fd0, rel=1e-5)

    def test_monotone_on_random_graphs(self, rng):
        grid = np.linspace(0, 1 - 1e-9, 1000)
        for _ in range(20):
            gt = gamma_tilde(random_connected_graph(rng, int(rng.integers(3, 20))))
            assert np.all(np.diff(phi_distance(grid, gt)) > 0)

    def test_kld_matches_dense(self, rng):
        for n in (2, 5, 12, 20):
            g = random_connected_graph(rng, n)
            s = scale_structured(g)
            gt = phi_eigenvalues(s.q_star, s.null_dimension)
            pinv = dense_pseudo_inverse(s.q_star, s.null_dimension)
            for phi in (0.01, 0.4, 0.95):
                sig = (1 - phi) * np.eye(n) + phi * pinv
                dense = 0.5 * (np.trace(sig) - n - np.linalg.slogdet(sig)[1])
                assert phi_kld(phi, gt) == pytest.approx(dense, abs=1e-10)


class TestPhiPrior:
    def test_lambda(self):
        assert phi_pc_lambda(0.5, 2 / 3, P2_GT) == pytest.approx(P2_LAMBDA, rel=1e-12)
        assert P2_LAMBDA == pytest.approx(2.048274, abs=1e-6)
        lams = [phi_pc_lambda(0.5, a, P2_GT) for a in (1e-8, 0.1, 0.5, 0.9)]
        assert np.all(np.diff(lams) > 0) and lams[0] < 1e-7

    def test_cdf_by_quadrature(self, p2):
        t = PCPhiPrior(0.5, 2 / 3).bind(gamma_tilde(p2))
        assert logit_mass(t, 0.0) == pytest.approx(2 / 3, abs=1e-6)

    @pytest.mark.parametrize("n", [2, 3])
    def test_normalised(self, n):
        t = PCPhiPrior().bind(gamma_tilde(Graph.lattice(1, n)))
        assert logit_mass(t) == pytest.approx(1.0, abs=1e-3)

    def test_density_decreasing_in_distance(self):
        # on the distance scale the density is lambda exp(-lambda d)
        phi = np.linspace(0.01, 0.99, 50)
        t = PhiPriorTable.pc(0.5, 0.5, P2_GT)
        on_d = t.log_density(phi) - np.log(phi_distance_deriv(phi, P2_GT))
        assert np.all(np.diff(on_d) < 0)

    def test_table_matches_direct(self, rng):
        t = PCPhiPrior().bind(gamma_tilde(random_connected_graph(rng, 15)))
        phi = expit(np.linspace(-19.5, 19.5, 20001))
        np.testing.assert_allclose(t.log_density_tabulated(phi), t.log_density(phi), atol=1e-6)

    def test_table_shape_and_mass(self, p2):
        t = PCPhiPrior().bind(gamma_tilde(p2))
        phi, lg, ld = t.table()
        assert len(phi) == 1000
        np.testing.assert_allclose(phi, expit(lg))
        assert np.trapezoid(np.exp(ld), phi) == pytest.approx(1.0, abs=1e-3)

    def test_logit_density_consistent(self, p3):
        t = PCPhiPrior().bind(gamma_tilde(p3))
        s = np.linspace(-8, 8, 33)
        phi = expit(s)
        np.testing.assert_allclose(t.log_density_internal(s),
                                   t.log_density(phi) + np.log(phi * (1 - phi)), rtol=1e-9)

    def test_extreme_logits_finite(self, p3):
        t = PCPhiPrior().bind(gamma_tilde(p3))
        assert np.all(np.isfinite(t.log_density_internal(np.array([-1e4, -50, 50, 1e4]))))

    def test_uniform(self):
        t = UniformPhiPrior().bind()
        np.testing.assert_array_equal(t.log_density(np.array([0.1, 0.5, 0.9])), 0.0)
        assert uniform_phi_log_density(0.3) == 0.0
        assert t.cdf(0.25) == 0.25
        with pytest.raises(ValueError):
            uniform_phi_log_density(1.5)

    def test_needs_null_space(self):
        with pytest.raises(ValueError):
            PhiPriorTable.pc(0.5, 0.5, np.array([1.0, 2.0]))


@settings(max_examples=40, deadline=None)
@given(U=st.floats(0.05, 0.95), alpha=st.floats(0.05, 0.95))
def test_cdf_at_u_property(U, alpha):
    t = PhiPriorTable.pc(U, alpha, np.array([0.0, 0.4, 1.1, 2.5]))
    assert t.cdf(U) == pytest.approx(alpha, abs=1e-12)


@pytest.mark.parametrize("text, expected", [
    ("pc:1,0.01", PCPrecPrior(1.0, 0.01)),
    ("pc(0.2/0.31, 0.1)", PCPrecPrior(0.2 / 0.31, 0.1)),
    ("gamma:1,0.01", GammaPrecPrior(1.0, 0.01)),
])
def test_parse_prec(text, expected):
    assert parse_prec_prior(text) == expected


def test_parse_phi():
    assert parse_phi_prior("pc:0.5,2/3") == PCPhiPrior(0.5, 2 / 3)
    assert isinstance(parse_phi_prior("uniform"), UniformPhiPrior)
    for bad in ("pc:1.5,0.5", "gamma:1,1", "pc:0.5"):
        with pytest.raises(ValueError):
            parse_phi_prior(bad)
    with pytest.raises(ValueError):
        parse_prec_prior("uniform")
