"""Acceptance suite: one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so ``pytest tests/test_acceptance.py`` lists every criterion even
when some fail.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from hesslab import autolr, cli, lanczos, nn, rmt, scaling
from hesslab.nn import Loss, MlpSpec
from hesslab.rmt import NoiseScale

torch.set_default_dtype(torch.float64)

SIGMA = 1.0
QS = (0.25, 0.5, 1.0)


# --------------------------------------------------------------------------- 1 & 3


@pytest.fixture(scope="module")
def wigner_draws():
    """20 spiked GOE draws per q at P=4000, lambda1=3: top eigenvalues and overlaps."""
    P, lam, draws = 4000, 3.0, 20
    t0 = time.perf_counter()
    out = {}
    for i, q in enumerate(QS):
        tops, overlaps = [], []
        for t in range(draws):
            a, u = rmt.sample_spiked_goe(P, math.sqrt(q) * SIGMA, [lam], seed=[1, i, t], return_vectors=True)
            top, vec = rmt.top_eigenpair(a, seed=t)
            tops.append(top)
            overlaps.append(float(u[:, 0] @ vec) ** 2)
        out[q] = (np.array(tops), np.array(overlaps))
    return out, time.perf_counter() - t0


def test_c01_wigner_outlier(criterion, wigner_draws):
    draws, seconds = wigner_draws
    errs = {}
    for q, (tops, _) in draws.items():
        pred = rmt.wigner_spike(3.0, NoiseScale.from_q(q, SIGMA**2)).lambda_prime
        assert pred == pytest.approx(3.0 + q * SIGMA**2 / 3.0)
        errs[q] = abs(tops.mean() - pred) / pred
    ok = max(errs.values()) <= 0.02 and seconds < 120
    detail = ", ".join(f"q={q}: {e:.2%}" for q, e in errs.items()) + f"; {seconds:.0f}s"
    assert criterion(1, "Wigner outlier location within 2%", ok, detail)


def test_c03_overlap(criterion, wigner_draws):
    q, lam = 0.5, 3.0
    _, overlaps = wigner_draws[0][q]
    pred = rmt.wigner_spike(lam, NoiseScale.from_q(q, SIGMA**2)).overlap_sq
    assert pred == pytest.approx(1 - q * SIGMA**2 / lam**2)
    err = abs(overlaps.mean() - pred)
    assert criterion(3, "squared overlap within 0.05", err <= 0.05, f"measured {overlaps.mean():.4f} vs {pred:.4f}")


# --------------------------------------------------------------------------- 2


def test_c02_subthreshold_absorption(criterion):
    P, draws = 4000, 10
    errs = {}
    for i, q in enumerate(QS):
        s = math.sqrt(q) * SIGMA
        ns = NoiseScale.from_q(q, SIGMA**2)
        pred = rmt.wigner_spike(0.5 * s, ns)
        assert pred.regime is rmt.Regime.BULK_ABSORBED
        assert pred.lambda_prime == pytest.approx(2 * s)
        tops = [rmt.top_eigenpair(rmt.sample_spiked_goe(P, s, [0.5 * s], seed=[2, i, t]), seed=t)[0] for t in range(draws)]
        errs[q] = abs(np.mean(tops) - 2 * s) / (2 * s)
    ok = max(errs.values()) <= 0.02
    assert criterion(2, "sub-threshold spike absorbed at the bulk edge (2%)", ok, ", ".join(f"q={q}: {e:.2%}" for q, e in errs.items()))


# --------------------------------------------------------------------------- 4


def test_c04_mp_spike(criterion):
    P, beta, spike, draws = 2000, 0.5, 5.0, 20
    n = int(P / beta)
    tops = [rmt.top_eigenpair(rmt.sample_spiked_wishart(P, n, SIGMA, [spike * SIGMA**2], seed=[4, t]), seed=t)[0] for t in range(draws)]
    measured = float(np.mean(tops))
    routes = rmt.mp_spike_routes(spike * SIGMA**2, NoiseScale.from_q(beta, SIGMA**2))
    chosen = routes[rmt.DEFAULT_MP_ROUTE]
    err = abs(measured - chosen.lambda_prime) / measured
    report = {r: {"predicted": p.lambda_prime, "regime": p.regime.value, "rel_err": abs(measured - p.lambda_prime) / measured} for r, p in routes.items()}
    print("MP route discrepancy report:", json.dumps({"measured": measured, "routes": report}, sort_keys=True))
    assert len(routes) == 2 and all(math.isfinite(r["predicted"]) for r in report.values())
    detail = "; ".join(f"{r}: {v['predicted']:.4f} ({v['rel_err']:.2%})" for r, v in report.items()) + f"; measured {measured:.4f}"
    assert criterion(4, f"MP spike via '{rmt.DEFAULT_MP_ROUTE}' route within 5%", err <= 0.05, detail)


# --------------------------------------------------------------------------- 5


def test_c05_lanczos_exactness(criterion):
    rng = np.random.default_rng(5)
    g = rng.standard_normal((50, 50))
    a = (g + g.T) / 2
    ev = np.linalg.eigvalsh(a)
    T = lanczos.lanczos_decompose(a, 50, seed=0)
    nodes = lanczos.ritz_quadrature(T).nodes
    full_err = float(np.max(np.abs(np.sort(nodes) - ev))) if len(nodes) == 50 else math.inf

    v = rng.standard_normal(50)
    v /= np.linalg.norm(v)
    rule = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, 4, start=v))
    moment_err, power = 0.0, v.copy()
    for k in range(8):
        moment_err = max(moment_err, abs(rule.moment(k) - v @ power))
        power = a @ power
    ok = full_err < 1e-8 and moment_err < 1e-8
    assert criterion(5, "Lanczos exact at m=P and moment identity to k=7", ok, f"max Ritz error {full_err:.1e}, moment error {moment_err:.1e}")


# --------------------------------------------------------------------------- 6


def test_c06_slq_semicircle_moments(criterion):
    P = 2000
    a = rmt.sample_spiked_goe(P, SIGMA, seed=6)
    density = lanczos.slq_density(a, 100, n_vectors=100, seed=60)
    want = {1: 0.0, 2: SIGMA**2, 3: 0.0, 4: 2 * SIGMA**4}
    # zero odd moments are judged against the natural scale sigma^k
    errs = {k: abs(density.moment(k) - w) / max(abs(w), SIGMA**k) for k, w in want.items()}
    ok = max(errs.values()) <= 0.02
    assert criterion(6, "SLQ moments 1-4 within 2% of semicircle", ok, ", ".join(f"m{k}: {e:.2%}" for k, e in errs.items()))


# --------------------------------------------------------------------------- 7 & 8


def torch_loss(spec, batch):
    x = torch.tensor(batch.inputs)
    y = torch.tensor(batch.labels, dtype=torch.long)

    def f(flat):
        k, a = 0, x
        for i, (out, inp) in enumerate(spec.shapes):
            W = flat[k : k + out * inp].reshape(out, inp)
            k += out * inp
            a = a @ W.T + flat[k : k + out]
            k += out
            if i < len(spec.shapes) - 1:
                a = torch.relu(a)
        return torch.nn.functional.cross_entropy(a, y)

    return f


def test_c07_hvp_and_gradient(criterion):
    spec = MlpSpec((4, 8, 3))
    data = nn.gaussian_mixture(3, 4, 10, 2.0, seed=7)
    p = nn.init_params(spec, 8)
    dense = torch.autograd.functional.hessian(torch_loss(spec, data), torch.tensor(p)).numpy()
    rng = np.random.default_rng(9)
    hvp_err = 0.0
    for _ in range(5):
        v = rng.standard_normal(spec.P)
        want = dense @ v
        hvp_err = max(hvp_err, np.linalg.norm(nn.hvp(p, spec, data, v) - want) / np.linalg.norm(want))
    cols = nn.exact_hessian(p, spec, data)
    col_err = np.linalg.norm(cols - dense) / np.linalg.norm(dense)

    h = 1e-5
    g = nn.gradient(p, spec, data)
    fd = np.array([(nn.batch_loss(p + h * e, spec, data) - nn.batch_loss(p - h * e, spec, data)) / (2 * h) for e in np.eye(spec.P)])
    grad_err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    ok = max(hvp_err, col_err) < 1e-8 and grad_err < 1e-5
    assert criterion(7, "HVP vs dense Hessian < 1e-8, gradient vs finite differences < 1e-5", ok, f"hvp {max(hvp_err, col_err):.1e}, grad {grad_err:.1e}")


def test_c08_ggn_rank_bound(criterion):
    spec = MlpSpec((4, 8, 3))
    data = nn.gaussian_mixture(3, 4, 10, 2.0, seed=8).subset(np.arange(4))
    ranks = []
    for seed in range(3):
        ggn = nn.dense_curvature(nn.init_params(spec, seed), spec, data, "ggn")
        ranks.append(int(np.sum(np.abs(np.linalg.eigvalsh(ggn)) > 1e-8)))
    ok = max(ranks) <= 4 * 3
    assert criterion(8, "GGN on B=4, d_y=3 has at most 12 nonzero eigenvalues", ok, f"ranks {ranks}")


# --------------------------------------------------------------------------- 9


def test_c09_fluctuation_variance_scaling(criterion):
    data = nn.gaussian_mixture(4, 8, 500, 2.0, seed=9)
    spec = MlpSpec((8, 16, 4))
    assert data.N == 2000 and 190 <= spec.P <= 220
    p = nn.init_params(spec, 10)
    h_emp = nn.exact_hessian(p, spec, data)
    rng = np.random.default_rng(11)
    consts = {}
    for B in (10, 20, 40):
        sq = []
        for _ in range(40):
            diff = nn.exact_hessian(p, spec, nn.sample_batch(data, B, rng)) - h_emp
            sq.append(np.mean(diff**2))
        consts[B] = float(np.mean(sq)) / (1 / B - 1 / data.N)
    c = np.array(list(consts.values()))
    spread = float(np.max(np.abs(c / c.mean() - 1)))
    assert criterion(9, "element variance of the fluctuation scales as 1/B - 1/N (15%)", spread <= 0.15, f"max deviation {spread:.1%}")


# --------------------------------------------------------------------------- 10


def test_c10_batch_lambda_prediction(criterion):
    data = nn.gaussian_mixture(3, 10, 500, 3.0, seed=0)
    spec = MlpSpec((10, 16, 3))
    p = nn.init_params(spec, 100)
    z = {}
    for B in (25, 50, 100):
        rep = scaling.curvature_report(p, spec, data, B, n_batches=10, m=100, seed=7)
        z[B] = (rep.lambda1_batch_predicted - rep.lambda1_batch_measured_mean) / rep.lambda1_batch_measured_std
    ok = all(abs(v) <= 1 for v in z.values())
    assert criterion(10, "predicted batch top eigenvalue within 1 std of measurement", ok, ", ".join(f"B={B}: z={v:+.2f}" for B, v in z.items()))


# --------------------------------------------------------------------------- 11


def test_c11_rank_bound_arithmetic(criterion):
    bound, floor = rmt.rank_bound_ffn(rmt.FfnArch(1024, 10, (13416,), 16_000_000))
    ok = bound == 577_600 and abs(floor - 0.9639) < 5e-5
    assert criterion(11, "rank bound 577600 and degeneracy floor 0.9639", ok, f"{bound}, {floor:.5f}")


# --------------------------------------------------------------------------- 12


def test_c12_polyak_contraction(criterion):
    eigs = np.linspace(1.0, 4.0, 50)
    alpha, rho = autolr.polyak_hyperparams(4.0, 1.0)
    state = autolr.SgdMomentum(np.zeros(eigs.size), alpha, rho)
    w = np.random.default_rng(12).standard_normal(eigs.size)
    norms = []
    for _ in range(201):
        norms.append(np.linalg.norm(w))
        w = autolr.sgd_step(state, w, eigs * w)
    rate = (norms[200] / norms[100]) ** (1 / 100)
    ok = abs(rate - 1 / 3) <= 0.1 / 3
    assert criterion(12, "heavy-ball contraction within 10% of 1/3", ok, f"rate {rate:.4f}")


# --------------------------------------------------------------------------- 13


def test_c13_sgd_stability_law(criterion):
    # linear model with squared error: the curvature is constant, so the
    # stability boundary is sharp
    data = nn.gaussian_mixture(3, 6, 200, 3.0, seed=13)
    spec = MlpSpec((6, 3), Loss.SQUARED_ERROR)
    p0 = nn.init_params(spec, 14)
    B = 32
    rep = scaling.curvature_report(p0, spec, data, B, n_batches=10, m=spec.P, seed=15)
    bound = scaling.max_lr_sgd(rep.lambda1_batch_predicted)
    base = dict(spec=spec, train=data, val=data, batch_size=B, epochs=20, init_params=p0, seed=16)
    stable = autolr.train(autolr.RunConfig(lr=0.5 * bound, **base))
    unstable = autolr.train(autolr.RunConfig(lr=2.5 * bound, **base))
    ok = not stable.diverged and unstable.diverged and unstable.diverged_epoch <= 20
    detail = f"2/lambda' = {bound:.3f}; 0.5x {stable.outcome}, 2.5x {unstable.outcome} at epoch {unstable.diverged_epoch}"
    assert criterion(13, "SGD stable at half the bound, diverges at 2.5x", ok, detail)


# --------------------------------------------------------------------------- 14


def test_c14_scaling_curve_shape(criterion):
    lam, s2, P = 2.0, 0.5, 2000
    b_star, _ = scaling.threshold_batch(lam, s2, P)
    B = np.unique(np.geomspace(1, 400 * b_star, 300).astype(int))
    lrs = scaling.max_lr_curve(lam, s2, P, B)
    monotone = bool(np.all(np.diff(lrs) > 0))
    past = B > 4 * b_star
    slopes = np.diff(np.log(lrs[past])) / np.diff(np.log(B[past]))
    ok = monotone and float(slopes.max()) < 0.2
    assert criterion(14, "max LR increases with batch and flattens past 4 b*", ok, f"monotone={monotone}, max slope past 4b* {slopes.max():.3f}")


# --------------------------------------------------------------------------- 15


SMALL = ["--classes", "3", "--dim", "4", "--n-per-class", "20", "--hidden", "5"]
CLI_RUNS = {
    "predict-spike": ["--law", "mp", "--lambda1", "5", "--q", "0.5", "--s2", "1"],
    "validate-rmt": ["--p", "200", "--trials", "2", "--lambda1s", "3", "--qs", "0.5", "--law", "both"],
    "spectrum": SMALL + ["--m", "10", "--n-vectors", "3"],
    "variance": SMALL + ["--n-vectors", "2"],
    "scale-lr": SMALL + ["--batch-sizes", "10,20", "--measure", "--n-batches", "2", "--m", "20"],
    "rank-bound": ["--d-x", "1024", "--d-y", "10", "--sum-hidden", "13416", "--P", "1.6e7"],
    "train": SMALL + ["--epochs", "3", "--autolr", "polyak", "--probe-period", "1", "--probe-m", "10"],
    "lr-grid": SMALL + ["--epochs", "2", "--n-lr", "3"],
}


def test_c15_cli_determinism(criterion, tmp_path):
    mismatched = []
    for name, argv in CLI_RUNS.items():
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            cli.main([name, "--seed", "15", "--out-dir", str(out)] + argv)
            outputs.append({f.name: f.read_bytes() for f in sorted(out.iterdir()) if f.suffix in (".csv", ".json")})
        # a third run driven by the first run's manifest
        out = tmp_path / name / "c"
        cli.main([name, "--config", str(tmp_path / name / "a" / "manifest.json"), "--out-dir", str(out)])
        outputs.append({f.name: f.read_bytes() for f in sorted(out.iterdir()) if f.suffix in (".csv", ".json")})
        if not outputs[0] or any(o != outputs[0] for o in outputs[1:]):
            mismatched.append(name)
    ok = not mismatched
    assert criterion(15, "every CLI command reruns byte-identically", ok, f"{len(CLI_RUNS)} commands" + (f", mismatched: {mismatched}" if mismatched else ""))
