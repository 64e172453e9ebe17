"""Matrix-free spectral estimation.

Lanczos tridiagonalisation with full reorthogonalisation, Gauss-quadrature
(Ritz) spectral densities, Hutchinson trace estimates, the per-sample Hessian
variance estimator and Ritz-mass degeneracy estimates.

Operators are anything with ``dim`` and ``apply(v)`` (see :class:`Operator`);
dense arrays can be wrapped with :func:`as_operator`.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from ._random import spawn

BREAKDOWN_TOL = 1e-12
REORTH_TOL = 1e-10


class Operator(Protocol):
    dim: int

    def apply(self, v: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class MatrixOperator:
    """Dense or callable-backed symmetric linear operator."""

    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.fn(v)


def as_operator(a) -> Operator:
    if hasattr(a, "apply") and hasattr(a, "dim"):
        return a
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return MatrixOperator(a.shape[0], lambda v: a @ v)


@dataclass
class TridiagonalFactor:
    alphas: np.ndarray
    betas: np.ndarray
    basis: np.ndarray | None = None
    breakdown: bool = False

    @property
    def m(self) -> int:
        return len(self.alphas)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "beta"])
        for i, a in enumerate(self.alphas):
            b = repr(float(self.betas[i])) if i < len(self.betas) else ""
            w.writerow([repr(float(a)), b])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TridiagonalFactor":
        rows = list(csv.DictReader(io.StringIO(text)))
        alphas = np.array([float(r["alpha"]) for r in rows])
        betas = np.array([float(r["beta"]) for r in rows[:-1]])
        return cls(alphas, betas)


@dataclass
class RitzSpectrum:
    """Discrete spectral density: ascending nodes with weights summing to one."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-d arrays of equal length")

    def __len__(self) -> int:
        return len(self.nodes)

    def moment(self, k: int) -> float:
        return float(np.sum(self.weights * self.nodes**k))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "weight"])
        for t, r in zip(self.nodes, self.weights):
            w.writerow([repr(float(t)), repr(float(r))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RitzSpectrum":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            np.array([float(r["node"]) for r in rows]),
            np.array([float(r["weight"]) for r in rows]),
        )


def probe_vector(dim: int, rng: np.random.Generator, kind: str = "rademacher") -> np.ndarray:
    if kind == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=dim)
    if kind == "gaussian":
        return rng.standard_normal(dim)
    raise ValueError(f"unknown probe kind {kind!r}")


def _checked_apply(op: Operator, v: np.ndarray) -> np.ndarray:
    w = np.asarray(op.apply(v), dtype=float)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("operator returned non-finite values")
    return w


def lanczos_decompose(
    op,
    m: int,
    seed=None,
    probe: str = "rademacher",
    keep_basis: bool = False,
    start: np.ndarray | None = None,
) -> TridiagonalFactor:
    """m-step Lanczos with full reorthogonalisation at every step.

    Stops early (``breakdown=True``) when an off-diagonal falls below 1e-12; an
    invariant subspace has been found and the shorter factor is exact.
    """
    op = as_operator(op)
    P = op.dim
    if not 1 <= m <= P:
        raise ValueError(f"need 1 <= m <= dim ({P}), got m={m}")
    if start is None:
        start = probe_vector(P, np.random.default_rng(seed), probe)
    q = np.asarray(start, dtype=float)
    q = q / np.linalg.norm(q)

    Q = np.zeros((m, P))
    alphas, betas = [], []
    breakdown = False
    Q[0] = q
    for j in range(m):
        w = _checked_apply(op, Q[j])
        a = float(Q[j] @ w)
        alphas.append(a)
        if j == m - 1:
            break
        w -= a * Q[j]
        if j > 0:
            w -= betas[-1] * Q[j - 1]
        basis = Q[: j + 1]
        w -= basis.T @ (basis @ w)
        nrm = np.linalg.norm(w)
        # second pass if orthogonality against the basis was not restored
        if nrm > 0 and np.max(np.abs(basis @ w)) > REORTH_TOL * nrm:
            w -= basis.T @ (basis @ w)
            nrm = np.linalg.norm(w)
        if nrm < BREAKDOWN_TOL:
            breakdown = True
            break
        betas.append(float(nrm))
        Q[j + 1] = w / nrm

    k = len(alphas)
    return TridiagonalFactor(
        np.array(alphas),
        np.array(betas),
        Q[:k].copy() if keep_basis else None,
        breakdown,
    )


def ritz_quadrature(T: TridiagonalFactor) -> RitzSpectrum:
    """Gauss quadrature rule of the factor: Ritz values and squared first components."""
    if T.m == 1:
        return RitzSpectrum(np.array([T.alphas[0]]), np.array([1.0]))
    try:
        nodes, vecs = eigh_tridiagonal(T.alphas, T.betas)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"tridiagonal eigensolve failed: {exc}") from exc
    weights = vecs[0] ** 2
    return RitzSpectrum(nodes, weights / weights.sum())


def _merge(nodes: np.ndarray, weights: np.ndarray) -> RitzSpectrum:
    order = np.argsort(nodes, kind="stable")
    nodes, weights = nodes[order], weights[order]
    uniq, inv = np.unique(nodes, return_inverse=True)
    merged = np.zeros(len(uniq))
    np.add.at(merged, inv, weights)
    return RitzSpectrum(uniq, merged / merged.sum())


def slq_density(op, m: int, n_vectors: int = 1, seed=None, probe: str = "rademacher") -> RitzSpectrum:
    """Stochastic Lanczos quadrature: Ritz spectra averaged over probe vectors."""
    if n_vectors < 1:
        raise ValueError("n_vectors must be >= 1")
    op = as_operator(op)
    nodes, weights = [], []
    for ss in spawn(seed, n_vectors):
        spec = ritz_quadrature(lanczos_decompose(op, m, seed=ss, probe=probe))
        nodes.append(spec.nodes)
        weights.append(spec.weights / n_vectors)
    if n_vectors == 1:
        return RitzSpectrum(nodes[0], weights[0])
    return _merge(np.concatenate(nodes), np.concatenate(weights))


def hutchinson_trace(op, n_probes: int, seed=None, probe: str = "rademacher") -> float:
    """Mean of v^T A v over random probes."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    op = as_operator(op)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_probes):
        v = probe_vector(op.dim, rng, probe)
        total += float(v @ _checked_apply(op, v))
    return total / n_probes


def hessian_variance(sample_ops: Iterable, v: np.ndarray, normalize: bool = True) -> float:
    """Single-pass Hessian variance along ``v`` from a stream of per-sample operators.

    normalize=True:  (1/N) sum_i |H_i v|^2 - (v^T Hbar v)^2
    normalize=False: sum_i |H_i v|^2 - (v^T Hbar v)^2   (first sum not averaged)
    """
    v = np.asarray(v, dtype=float)
    sq_sum = 0.0
    hv_sum = np.zeros_like(v)
    n = 0
    for op in sample_ops:
        hv = _checked_apply(as_operator(op), v)
        sq_sum += float(hv @ hv)
        hv_sum += hv
        n += 1
    if n == 0:
        raise ValueError("empty stream of sample operators")
    mean_quad = float(v @ hv_sum) / n
    first = sq_sum / n if normalize else sq_sum
    return first - mean_quad**2


def random_unit_vector(dim: int, seed=None) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def per_element_variance(alg1_output: float, P: int) -> float:
    """Homogenised per-element variance s2 = output / P (small negatives clamp to 0)."""
    return max(0.0, alg1_output) / P


class DegeneracyMode(str, enum.Enum):
    NEAREST_ORIGIN = "nearest_origin"
    MERGE_TWO_CLOSEST = "merge_two_closest"


def degeneracy_estimate(spec: RitzSpectrum, mode: DegeneracyMode | str = DegeneracyMode.NEAREST_ORIGIN) -> tuple[float, float]:
    """Mass and location of the Ritz node(s) standing in for the zero eigenvalue."""
    if len(spec) == 0:
        raise ValueError("empty spectrum")
    mode = DegeneracyMode(mode)
    order = np.argsort(np.abs(spec.nodes), kind="stable")
    if mode is DegeneracyMode.NEAREST_ORIGIN or len(spec) == 1:
        i = order[0]
        return float(spec.weights[i]), float(spec.nodes[i])
    idx = order[:2]
    mass = float(spec.weights[idx].sum())
    value = float(spec.weights[idx] @ spec.nodes[idx]) / mass if mass > 0 else 0.0
    return mass, value


def extremal_eigenvalues(op, m: int, seed=None) -> tuple[float, float]:
    """(largest, smallest) Ritz value after m Lanczos steps."""
    spec = ritz_quadrature(lanczos_decompose(op, m, seed=seed))
    return float(spec.nodes[-1]), float(spec.nodes[0])


def sum_operators(ops: Sequence, scale: float = 1.0) -> MatrixOperator:
    ops = [as_operator(o) for o in ops]
    dim = ops[0].dim
    return MatrixOperator(dim, lambda v: scale * sum(o.apply(v) for o in ops))


__all__ = [
    "Operator",
    "MatrixOperator",
    "as_operator",
    "TridiagonalFactor",
    "RitzSpectrum",
    "DegeneracyMode",
    "lanczos_decompose",
    "ritz_quadrature",
    "slq_density",
    "hutchinson_trace",
    "hessian_variance",
    "per_element_variance",
    "degeneracy_estimate",
    "extremal_eigenvalues",
    "random_unit_vector",
    "sum_operators",
    "probe_vector",
]
