"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 2 needs an external 544-district graph file, given through the
BYM2_GERMANY_GRAPH environment variable; without it the test is skipped.
Criteria 6 to 9 share one replicated study on the 10x10 lattice.
"""
import os
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import logit

from bym2.graph import Graph, parse_graph, read_graph, serialize_graph, write_graph
from bym2.inference import Dataset, FixedEffects, fit, parse_data, read_data
from bym2.linalg import dense_pseudo_inverse
from bym2.models import build_latent_model
from bym2.priors import PCPrecPrior, PhiPriorTable, phi_eigenvalues, phi_kld
from bym2.scaling import scale_structured
from bym2.sim import STUDY_GRID, Scenario, StudyConfig, run_study

from conftest import random_connected_graph, record_criterion

# exact value of (5/9 * 2/9 * 5/9)^(1/3); see the decisions ledger for the 0.40948 figure
P3_FACTOR = (50 / 729) ** (1 / 3)


def _gm(x):
    return float(np.exp(np.mean(np.log(x))))


def _check(number, ok, detail):
    record_criterion(number, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------


def test_criterion_01_scaling():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2016)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 41))
        g = random_connected_graph(rng, n, extra_edge_prob=float(rng.uniform(0.0, 0.3)))
        s = scale_structured(g)
        var = np.diag(dense_pseudo_inverse(s.q_star, 1))
        worst = max(worst, abs(_gm(var) - 1.0))
    f2 = scale_structured(Graph.lattice(1, 2)).scale_factors[0]
    f3 = scale_structured(Graph.lattice(1, 3)).scale_factors[0]
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and abs(f2 - 0.25) < 1e-4 and abs(f3 - P3_FACTOR) < 1e-4 and elapsed < 30
    _check(1, ok, f"max |gm-1| over 200 graphs = {worst:.2e}; P2 {f2:.6f}; P3 {f3:.6f}; {elapsed:.1f}s")


def test_criterion_02_external_graph():
    path = os.environ.get("BYM2_GERMANY_GRAPH")
    if not path or not os.path.exists(path):
        record_criterion(2, "SKIP", "no external 544-region graph (set BYM2_GERMANY_GRAPH)")
        pytest.skip("external graph not supplied")
    g = read_graph(path)
    s = scale_structured(g)
    # the largest component carries the reported factor
    sizes = [len(m) for m in s.groups]
    factor = float(s.scale_factors[int(np.argmax(sizes))])
    _check(2, g.n_regions == 544 and abs(factor - 0.56) <= 0.02,
           f"n = {g.n_regions}, scale factor {factor:.4f} (target 0.56 +/- 0.02)")


def test_criterion_03_pc_precision():
    t0 = time.perf_counter()
    errs_norm, errs_tail = [], []
    for U, alpha in [(1.0, 0.01), (0.2 / 0.31, 0.1)]:
        prior = PCPrecPrior(U, alpha)
        f = lambda lt: np.exp(prior.log_density_internal(lt))
        total = quad(f, -np.inf, np.inf, epsabs=1e-13, limit=400)[0]
        tail = quad(f, -np.inf, -2 * np.log(U), epsabs=1e-13, limit=400)[0]
        errs_norm.append(abs(total - 1))
        errs_tail.append(abs(tail - alpha))
    elapsed = time.perf_counter() - t0
    ok = max(errs_norm) < 1e-6 and max(errs_tail) < 1e-8 and elapsed < 1
    _check(3, ok, f"normalisation err {max(errs_norm):.1e}; tail err {max(errs_tail):.1e}; {elapsed:.2f}s")


def _logit_mass(table, upper=None):
    f = lambda x: np.exp(table.log_density_internal(x))
    if upper is not None and upper <= 0:
        return quad(f, -np.inf, upper, epsabs=1e-12, limit=500)[0]
    lo = quad(f, -np.inf, 0.0, epsabs=1e-12, limit=500)[0]
    top = np.log(upper) if upper is not None else np.log(1e12)
    # slow upper tail: integrate over log(logit phi)
    return lo + quad(lambda u: f(np.exp(u)) * np.exp(u), -40, top, epsabs=1e-12, limit=500)[0]


def test_criterion_04_pc_phi():
    t0 = time.perf_counter()
    norm_err = cdf_err = 0.0
    for g in (Graph.lattice(1, 2), Graph.lattice(1, 3), Graph.lattice(6, 6)):
        s = scale_structured(g)
        gt = phi_eigenvalues(s.q_star, s.null_dimension)
        for U, alpha in [(0.5, 2 / 3), (0.5, 0.5), (0.5, 0.1)]:
            t = PhiPriorTable.pc(U, alpha, gt)
            norm_err = max(norm_err, abs(_logit_mass(t) - 1))
            cdf_err = max(cdf_err, abs(_logit_mass(t, logit(U)) - alpha))
    rng = np.random.default_rng(4)
    kld_err = 0.0
    for n in (2, 3, 8, 14, 20):
        g = random_connected_graph(rng, n)
        s = scale_structured(g)
        gt = phi_eigenvalues(s.q_star, s.null_dimension)
        pinv = dense_pseudo_inverse(s.q_star, s.null_dimension)
        for phi in (0.05, 0.5, 0.95):
            sig = (1 - phi) * np.eye(n) + phi * pinv
            dense = 0.5 * (np.trace(sig) - n - np.linalg.slogdet(sig)[1])
            kld_err = max(kld_err, abs(float(phi_kld(phi, gt)) - dense))
    elapsed = time.perf_counter() - t0
    ok = norm_err < 1e-3 and cdf_err < 1e-3 and kld_err < 1e-10 and elapsed < 10
    _check(4, ok, f"normalisation err {norm_err:.1e}; CDF(U) err {cdf_err:.1e}; "
                  f"KLD err {kld_err:.1e}; {elapsed:.1f}s")


def _w1_covariance(model, theta):
    q = model.precision(theta).to_dense()
    sig = np.linalg.inv(q + 1e-10 * np.eye(q.shape[0]))
    A = model.constraints.A
    v = sig @ A.T
    sig = sig - v @ np.linalg.solve(A @ v, v.T)
    return sig[:model.n, :model.n]


def test_criterion_05_augmented_form():
    t0 = time.perf_counter()
    worst = 0.0
    for g in (Graph.lattice(1, 3), random_connected_graph(np.random.default_rng(8), 8)):
        s = scale_structured(g)
        model = build_latent_model("bym2", s)
        pinv = dense_pseudo_inverse(s.q_star, 1)
        for tau in (1.0, 4.0):
            for phi in (0.1, 0.5, 0.9):
                cov = _w1_covariance(model, np.array([np.log(tau), logit(phi)]))
                target = (1 - phi) / tau * np.eye(s.n) + phi / tau * pinv
                worst = max(worst, float(np.max(np.abs(cov - target))))
    elapsed = time.perf_counter() - t0
    _check(5, worst < 1e-6 and elapsed < 5, f"max |cov - target| = {worst:.1e}; {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# replicated study on the 10x10 lattice


SCENARIOS = [Scenario("constant", 0.0, 60), Scenario("iid", 0.5, 60), Scenario("structured", 0.5, 60)]


@pytest.fixture(scope="module")
def study():
    cfg = StudyConfig(graph=Graph.lattice(10, 10), scenarios=SCENARIOS, replicates=50)
    return run_study(cfg)


def _median(study, scenario, model, key):
    return float(np.median(study.values(scenario, model, key)))


def test_criterion_06_shrinkage(study):
    sig = {sc.risk_kind: _median(study, sc.label, "bym2-pc", "sigma") for sc in SCENARIOS}
    phi = {sc.risk_kind: _median(study, sc.label, "bym2-pc", "phi") for sc in SCENARIOS}
    failed = sum(r["status"] != "ok" for r in study.records)
    ok = (sig["constant"] < 0.05
          and 0.4 <= sig["iid"] <= 0.6 and phi["iid"] < 0.15
          and 0.35 <= sig["structured"] <= 0.65 and phi["structured"] > 0.7
          and failed == 0 and study.elapsed < 15 * 60)
    _check(6, ok, f"median sigma const/iid/struct = {sig['constant']:.3f}/{sig['iid']:.3f}/"
                  f"{sig['structured']:.3f}; median phi iid/struct = {phi['iid']:.3f}/"
                  f"{phi['structured']:.3f}; {failed} failed fits; {study.elapsed:.0f}s")


def test_criterion_07_prior_robustness(study):
    med = {(sc.risk_kind, m): _median(study, sc.label, m, "phi")
           for sc in SCENARIOS for m in ("bym2-pc", "bym2-unif")}
    d_iid = abs(med["iid", "bym2-unif"] - med["iid", "bym2-pc"])
    d_str = abs(med["structured", "bym2-unif"] - med["structured", "bym2-pc"])
    # the uniform prior is centred at 0.5
    toward = abs(med["constant", "bym2-unif"] - 0.5) < abs(med["constant", "bym2-pc"] - 0.5)
    ok = d_iid <= 0.07 and d_str <= 0.07 and toward
    _check(7, ok, f"|delta phi| iid {d_iid:.3f}, structured {d_str:.3f}; constant phi "
                  f"pc {med['constant', 'bym2-pc']:.3f} -> unif {med['constant', 'bym2-unif']:.3f}")


def test_criterion_08_ranking(study):
    parts, ok = [], True
    for sc in SCENARIOS[1:]:
        ls = {m: float(np.mean(study.values(sc.label, m, "ls")))
              for m in ("iid", "besag", "leroux", "dean", "bym2-unif", "bym2-pc")}
        if sc.risk_kind == "iid":
            ok &= ls["besag"] > ls["iid"]
        else:
            ok &= ls["iid"] > ls["besag"]
        lo, hi = sorted((ls["iid"], ls["besag"]))
        ok &= all(lo < ls[m] < hi for m in ("leroux", "dean", "bym2-unif", "bym2-pc"))
        parts.append(f"{sc.risk_kind}: " + " ".join(f"{m} {v:.4f}" for m, v in ls.items()))
    _check(8, ok, "; ".join(parts))


def test_criterion_09_inference_sanity(study):
    g = Graph.lattice(10, 10)
    s = scale_structured(g)
    E = np.full(100, 60.0)
    data = Dataset(E.copy(), E)
    worst_mu = worst_eff = worst_w = worst_grad = 0.0
    for kind in ("iid", "besag", "bym", "leroux", "dean", "bym2"):
        res = fit(build_latent_model(kind, s), data, STUDY_GRID, FixedEffects())
        mu = res.fixed_summary["intercept"]["mean"]
        worst_mu = max(worst_mu, abs(mu))
        worst_eff = max(worst_eff, float(np.max(np.abs(res.eta_mean - mu))))
        worst_w = max(worst_w, abs(res.weights.sum() - 1))
        worst_grad = max(worst_grad, res.metadata["max_constrained_gradient_norm"])
    study_grad = max(r["max_gradient_norm"] for r in study.records if r["status"] == "ok")
    ok = worst_mu < 0.02 and worst_eff < 0.02 and worst_w < 1e-12 and max(worst_grad, study_grad) < 1e-6
    _check(9, ok, f"|mu| {worst_mu:.1e}; max |effect| {worst_eff:.1e}; |sum w - 1| {worst_w:.1e}; "
                  f"max gradient norm {max(worst_grad, study_grad):.1e} over "
                  f"{len(study.records) + 6} fits")


SARDINIA_HEAD = """366
0 5 13 61 69 73 81
1 5 8 16 40 46 94
"""

GRAPH_TEXT = """6
0 2 1 3
1 3 0 2 4
2 2 1 5
3 2 0 4
4 3 1 3 5
5 2 2 4
"""

DATA_TEXT = """  y          E       SMR
1  1  0.5986411 1.6704500
2  0  0.6055964 0.0000000
3 10 13.3658700 0.7481743
4  0  0.2346664 0.0000000
"""


def test_criterion_10_formats(tmp_path):
    checks = []
    g = parse_graph(GRAPH_TEXT)
    checks.append(g == Graph.lattice(2, 3))
    for base in (0, 1):
        text = serialize_graph(g, base)
        again = parse_graph(text)
        checks.append(again == g and serialize_graph(again, base) == text)
    write_graph(g, tmp_path / "g.graph")
    checks.append(read_graph(tmp_path / "g.graph") == g)
    # the paper's listing is truncated; a partial file must be rejected, not misread
    try:
        parse_graph(SARDINIA_HEAD)
        checks.append(False)
    except ValueError:
        checks.append(True)

    (tmp_path / "d.dat").write_text(DATA_TEXT)
    d = read_data(tmp_path / "d.dat")
    checks.append(d.z is None and d.y.tolist() == [1, 0, 10, 0]
                  and np.allclose(d.E, [0.5986411, 0.6055964, 13.36587, 0.2346664]))
    bare = parse_data("\n".join(" ".join(line.split()[1:]) for line in DATA_TEXT.splitlines()[1:]))
    checks.append(bare.z is None and bare.n == 4)
    _check(10, all(checks), f"{sum(checks)}/{len(checks)} format checks")
