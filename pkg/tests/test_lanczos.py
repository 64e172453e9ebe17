import numpy as np
import pytest

from hesslab import lanczos, rmt
from hesslab.lanczos import DegeneracyMode, RitzSpectrum, TridiagonalFactor


def random_symmetric(P, seed):
    g = np.random.default_rng(seed).standard_normal((P, P))
    return (g + g.T) / 2


def test_identity_breaks_down_after_one_step():
    T = lanczos.lanczos_decompose(np.eye(10), 3, seed=0)
    assert T.breakdown and T.m == 1
    spec = lanczos.ritz_quadrature(T)
    assert spec.nodes == pytest.approx([1.0], abs=1e-14) and spec.weights.tolist() == [1.0]


def test_diagonal_exact_at_full_dimension():
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(np.diag(np.arange(1.0, 51)), 50, seed=1))
    assert np.max(np.abs(spec.nodes - np.arange(1, 51))) < 1e-8


@pytest.mark.parametrize("P", [5, 20, 50, 64])
def test_random_symmetric_exact_at_m_equals_p(P):
    a = random_symmetric(P, P)
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, P, seed=2))
    assert np.max(np.abs(spec.nodes - np.linalg.eigvalsh(a))) < 1e-8


def test_goe_extremal_nodes_close_to_dense():
    a = rmt.sample_spiked_goe(500, 1.0, seed=3)
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, 100, seed=4))
    ev = np.linalg.eigvalsh(a)
    assert spec.nodes[-1] == pytest.approx(ev[-1], rel=0.01)
    assert spec.nodes[0] == pytest.approx(ev[0], rel=0.01)


def test_basis_orthonormal_and_interlacing():
    a = random_symmetric(80, 5)
    T = lanczos.lanczos_decompose(a, 40, seed=6, keep_basis=True)
    Q = T.basis
    assert np.max(np.abs(Q @ Q.T - np.eye(T.m))) < 1e-10
    spec = lanczos.ritz_quadrature(T)
    ev = np.linalg.eigvalsh(a)
    assert spec.nodes[0] >= ev[0] - 1e-8 and spec.nodes[-1] <= ev[-1] + 1e-8
    assert np.all(np.diff(spec.nodes) > 0)
    assert np.all(spec.weights >= 0) and abs(spec.weights.sum() - 1) < 1e-12
    assert np.all(T.betas >= 0)


@pytest.mark.parametrize("P,m", [(20, 5), (50, 4)])
def test_moment_identity(P, m):
    a = random_symmetric(P, 10 + P)
    v = np.random.default_rng(3).choice([-1.0, 1.0], size=P)
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, m, start=v))
    u = v / np.linalg.norm(v)
    power = u.copy()
    for k in range(2 * m):
        # direct matrix-power oracle u^T A^k u
        assert spec.moment(k) == pytest.approx(u @ power, abs=1e-8)
        power = a @ power


def test_two_by_two_weights_are_overlaps():
    a = np.diag([1.0, 2.0])
    v = np.array([0.6, 0.8])
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, 2, start=v))
    assert spec.nodes == pytest.approx([1.0, 2.0])
    assert spec.weights == pytest.approx([0.36, 0.64])


def test_single_step_factor():
    T = TridiagonalFactor(np.array([2.5]), np.array([]))
    spec = lanczos.ritz_quadrature(T)
    assert spec.nodes.tolist() == [2.5] and spec.weights.tolist() == [1.0]


def test_domain_and_numeric_errors():
    with pytest.raises(ValueError):
        lanczos.lanczos_decompose(np.eye(4), 5)
    with pytest.raises(ValueError):
        lanczos.lanczos_decompose(np.ones((3, 4)), 2)
    bad = lanczos.MatrixOperator(4, lambda v: np.full(4, np.nan))
    with pytest.raises(FloatingPointError):
        lanczos.lanczos_decompose(bad, 2, seed=0)


def test_gaussian_probe_and_determinism():
    a = random_symmetric(30, 1)
    t1 = lanczos.lanczos_decompose(a, 10, seed=7, probe="gaussian")
    t2 = lanczos.lanczos_decompose(a, 10, seed=7, probe="gaussian")
    assert np.array_equal(t1.alphas, t2.alphas) and np.array_equal(t1.betas, t2.betas)
    with pytest.raises(ValueError):
        lanczos.lanczos_decompose(a, 3, seed=0, probe="sobol")


def test_csv_round_trips():
    T = lanczos.lanczos_decompose(random_symmetric(12, 2), 6, seed=1)
    text = T.to_csv()
    assert text.splitlines()[0] == "alpha,beta"
    assert text.splitlines()[-1].endswith(",")
    T2 = TridiagonalFactor.from_csv(text)
    assert np.array_equal(T2.alphas, T.alphas) and np.array_equal(T2.betas, T.betas)
    spec = lanczos.ritz_quadrature(T)
    spec2 = RitzSpectrum.from_csv(spec.to_csv())
    assert np.array_equal(spec.nodes, spec2.nodes) and np.array_equal(spec.weights, spec2.weights)


# ---------------------------------------------------------------- SLQ


def test_slq_single_vector_matches_ritz():
    a = random_symmetric(40, 3)
    ss = lanczos.spawn(9, 1)[0]
    ref = lanczos.ritz_quadrature(lanczos.lanczos_decompose(a, 10, seed=ss))
    spec = lanczos.slq_density(a, 10, 1, seed=9)
    assert np.array_equal(spec.nodes, ref.nodes) and np.array_equal(spec.weights, ref.weights)


def test_slq_multi_vector_is_average_of_quadratic_forms():
    a = random_symmetric(60, 4)
    spec = lanczos.slq_density(a, 8, 5, seed=2)
    assert abs(spec.weights.sum() - 1) < 1e-12
    assert np.all(np.diff(spec.nodes) > 0)
    # oracle: average over the same probes of v^T A^k v / |v|^2
    want = np.zeros(5)
    for ss in lanczos.spawn(2, 5):
        v = lanczos.probe_vector(60, np.random.default_rng(ss))
        u = v / np.linalg.norm(v)
        want += [u @ np.linalg.matrix_power(a, k) @ u for k in range(5)]
    want /= 5
    for k in range(5):
        assert spec.moment(k) == pytest.approx(want[k], rel=1e-8, abs=1e-10)


def test_slq_goe_moments_within_estimator_noise():
    # four Rademacher probes: m2 and m4 estimates have ~2-3% standard error at P=2000
    a = rmt.sample_spiked_goe(2000, 1.0, seed=12)
    spec = lanczos.slq_density(a, 100, 4, seed=13)
    assert abs(spec.moment(1)) < 0.1
    assert abs(spec.moment(3)) < 0.3
    assert spec.moment(2) == pytest.approx(1.0, rel=0.08)
    assert spec.moment(4) == pytest.approx(2.0, rel=0.1)


def test_slq_psd_nodes_nonnegative():
    g = np.random.default_rng(0).standard_normal((50, 20))
    spec = lanczos.slq_density(g @ g.T, 30, 3, seed=1)
    assert spec.nodes.min() >= -1e-8


def test_slq_rejects_zero_vectors():
    with pytest.raises(ValueError):
        lanczos.slq_density(np.eye(3), 2, 0)


# ---------------------------------------------------------------- Hutchinson


def test_hutchinson_identity_exact():
    assert lanczos.hutchinson_trace(np.eye(100), 3, seed=0) == 100.0


def test_hutchinson_diagonal():
    est = lanczos.hutchinson_trace(np.diag(np.arange(1.0, 201)), 30, seed=1)
    assert est == pytest.approx(20100, rel=0.05)
    # diagonal matrices are estimated exactly by Rademacher probes
    assert est == pytest.approx(20100, rel=1e-12)


def test_hutchinson_linear_under_shared_probes():
    a, b = random_symmetric(30, 1), random_symmetric(30, 2)
    ta = lanczos.hutchinson_trace(a, 7, seed=5)
    tb = lanczos.hutchinson_trace(b, 7, seed=5)
    assert lanczos.hutchinson_trace(a + b, 7, seed=5) == pytest.approx(ta + tb, rel=1e-12, abs=1e-12)


def test_hutchinson_unbiased_on_dense():
    a = random_symmetric(50, 8)
    est = lanczos.hutchinson_trace(a, 4000, seed=3)
    # Rademacher variance is 2 sum_{i != j} a_ij^2
    off = a - np.diag(np.diag(a))
    se = np.sqrt(2 * np.sum(off**2) / 4000)
    assert abs(est - np.trace(a)) < 4 * se


# ---------------------------------------------------------------- Hessian variance


def test_variance_hand_example():
    ops = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0])]
    v = np.array([1.0, 0.0])
    assert lanczos.hessian_variance(ops, v) == pytest.approx(0.25)
    assert lanczos.hessian_variance(ops, v, normalize=False) == pytest.approx(0.75)


def test_variance_identical_samples():
    h = random_symmetric(6, 1)
    w, vecs = np.linalg.eigh(h)
    assert lanczos.hessian_variance([h] * 4, vecs[:, 2]) == pytest.approx(0.0, abs=1e-12)
    v = lanczos.random_unit_vector(6, 0)
    assert lanczos.hessian_variance([h] * 4, v) == pytest.approx(v @ h @ h @ v - (v @ h @ v) ** 2)
    assert lanczos.hessian_variance([h] * 4, v) >= -1e-10


def test_variance_accepts_generators_and_rejects_empty():
    v = np.array([1.0, 0.0])
    assert lanczos.hessian_variance((np.eye(2) for _ in range(3)), v) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        lanczos.hessian_variance(iter([]), v)


def _synthetic_stream(P, N, s2, seed):
    """Per-sample matrices 2I + eps_i with symmetric Gaussian eps of element variance s2."""
    rng = np.random.default_rng(seed)
    mean = 2.0 * np.eye(P)
    scale = np.sqrt(s2 / 2)
    idx = np.arange(P)
    for _ in range(N):
        g = rng.standard_normal((P, P))
        e = (g + g.T) * scale  # off-diagonal variance s2
        e[idx, idx] = g[idx, idx] * np.sqrt(s2)  # diagonal variance s2 as well
        e += mean
        yield e


def test_per_element_variance_recovers_synthetic_s2():
    # with an isotropic mean the normalised estimator is sum_j Var[(eps v)_j] = P s2
    P, N, s2 = 400, 2000, 0.01
    for seed in range(5):
        v = lanczos.random_unit_vector(P, 100 + seed)
        out = lanczos.hessian_variance(_synthetic_stream(P, N, s2, seed), v)
        assert lanczos.per_element_variance(out, P) == pytest.approx(s2, rel=0.1)


def test_per_element_variance_trivial():
    assert lanczos.per_element_variance(7.0, 7) == 1.0
    assert lanczos.per_element_variance(0.0, 7) == 0.0
    assert lanczos.per_element_variance(-1e-14, 7) == 0.0


# ---------------------------------------------------------------- degeneracy


def test_degeneracy_examples():
    spec = RitzSpectrum(np.array([-0.001, 0.002, 5.0]), np.array([0.5, 0.45, 0.05]))
    mass, value = lanczos.degeneracy_estimate(spec, DegeneracyMode.MERGE_TWO_CLOSEST)
    assert mass == pytest.approx(0.95)
    assert value == pytest.approx((-0.0005 + 0.0009) / 0.95)
    mass, value = lanczos.degeneracy_estimate(spec, "nearest_origin")
    assert (mass, value) == (0.5, -0.001)
    one = RitzSpectrum(np.array([3.0]), np.array([1.0]))
    for mode in DegeneracyMode:
        assert lanczos.degeneracy_estimate(one, mode) == (1.0, 3.0)
    sym = RitzSpectrum(np.array([-0.2, 0.2, 4.0]), np.array([0.4, 0.4, 0.2]))
    assert lanczos.degeneracy_estimate(sym, "merge_two_closest")[1] == pytest.approx(0.0)


def test_degeneracy_detects_low_rank_mass():
    # rank-5 PSD matrix in 200 dimensions; rounding leaves the null space split
    # over two Ritz nodes near zero, which the merge mode recombines
    g = np.random.default_rng(1).standard_normal((200, 5))
    v = lanczos.probe_vector(200, np.random.default_rng(0))
    spec = lanczos.ritz_quadrature(lanczos.lanczos_decompose(g @ g.T, 20, start=v))
    basis, _ = np.linalg.qr(g)
    u = v / np.linalg.norm(v)
    null_mass = 1 - np.sum((basis.T @ u) ** 2)
    mass, value = lanczos.degeneracy_estimate(spec, "merge_two_closest")
    assert mass == pytest.approx(null_mass, abs=1e-8)
    assert abs(value) < 1e-8


def test_extremal_and_sum_operators():
    a, b = random_symmetric(20, 1), random_symmetric(20, 2)
    op = lanczos.sum_operators([a, b], 0.5)
    top, bottom = lanczos.extremal_eigenvalues(op, 20, seed=0)
    ev = np.linalg.eigvalsh((a + b) / 2)
    assert top == pytest.approx(ev[-1], abs=1e-8) and bottom == pytest.approx(ev[0], abs=1e-8)
