"""Random-matrix laws and spiked-eigenvalue predictions for sub-sampled curvature.

A mini-batch Hessian is modelled as the full-data Hessian plus a fluctuation
matrix whose entries have variance ``s2 / b_eff``.  The helpers here give the
closed-form bulk laws (semicircle, Marchenko-Pastur), the location of outlier
eigenvalues that survive the perturbation, and samplers for spiked ensembles
used as Monte-Carlo oracles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import linalg as sparse_linalg

from ._random import spawn

__all__ = [
    "Regime",
    "Tail",
    "NoiseScale",
    "Wigner",
    "MarchenkoPastur",
    "SpikePrediction",
    "FfnArch",
    "effective_batch",
    "spectral_law",
    "semicircle_density",
    "semicircle_stieltjes",
    "wigner_spike",
    "mp_density",
    "mp_stieltjes",
    "mp_t_transform",
    "mp_t_transform_single_root",
    "mp_spike",
    "mp_spike_routes",
    "invert_spike",
    "sample_spiked_goe",
    "sample_spiked_wishart",
    "spectral_moments",
    "rank_bound_ffn",
    "trial_seeds",
]

MP_ROUTES = ("t_transform", "closed_form")
DEFAULT_MP_ROUTE = "t_transform"


class Regime(str, enum.Enum):
    SEPARATED = "separated"
    BULK_ABSORBED = "bulk_absorbed"


class Tail(str, enum.Enum):
    TOP = "top"
    BOTTOM = "bottom"


class NotInvertibleError(ValueError):
    """Observed eigenvalue lies inside (or on) the bulk; no unique pre-image."""


class RegimeError(ArithmeticError):
    """Closed form evaluated outside the range where it is defined."""


def effective_batch(B: int, N: float) -> float:
    """Effective batch ``B / (1 - B/N)`` under sampling without replacement.

    ``N`` may be ``math.inf`` (infinite dataset, b_eff = B).  Returns ``math.inf``
    when ``B == N``: the batch is the whole dataset and there is no fluctuation.
    """
    if B <= 0 or N <= 0:
        raise ValueError(f"batch and dataset sizes must be positive, got B={B}, N={N}")
    if B > N:
        raise ValueError(f"batch size {B} exceeds dataset size {N}")
    if B == N:
        return math.inf
    if math.isinf(N):
        return float(B)
    return B / (1.0 - B / N)


@dataclass(frozen=True)
class NoiseScale:
    """Sub-sampling noise parameters.

    ``s2`` is the per-element variance of a single-sample Hessian entry.  ``N``
    can be ``math.inf`` to model an infinite (or freshly augmented) dataset.
    """

    P: int
    B: int
    N: float
    s2: float

    def __post_init__(self):
        if self.P <= 0:
            raise ValueError(f"P must be positive, got {self.P}")
        if self.s2 < 0:
            raise ValueError(f"s2 must be nonnegative, got {self.s2}")
        effective_batch(self.B, self.N)  # validates B, N

    @classmethod
    def from_q(cls, q: float, s2: float) -> "NoiseScale":
        """Noise scale with a given shape factor q = P / b_eff (uses B = 1, N = inf)."""
        if q < 0:
            raise ValueError(f"q must be nonnegative, got {q}")
        if q == 0:
            return cls(P=1, B=1, N=1, s2=s2)
        return cls(P=q, B=1, N=math.inf, s2=s2)

    @property
    def b_eff(self) -> float:
        return effective_batch(self.B, self.N)

    @property
    def q(self) -> float:
        """Shape factor P / b_eff; 0 when the batch is the full dataset."""
        b = self.b_eff
        return 0.0 if math.isinf(b) else self.P / b


@dataclass(frozen=True)
class Wigner:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def edges(self) -> tuple[float, float]:
        return -2.0 * self.sigma, 2.0 * self.sigma

    def density(self, x):
        return semicircle_density(x, self.sigma)


@dataclass(frozen=True)
class MarchenkoPastur:
    sigma2: float
    beta: float

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def edges(self) -> tuple[float, float]:
        r = math.sqrt(self.beta)
        return self.sigma2 * (1 - r) ** 2, self.sigma2 * (1 + r) ** 2

    def density(self, y):
        return mp_density(y, self.sigma2, self.beta)


SpectralLaw = Wigner | MarchenkoPastur


def spectral_law(ns: NoiseScale, kind: str = "wigner") -> SpectralLaw:
    """Bulk law of the fluctuation matrix implied by ``ns``.

    Wigner scale is sqrt(q * s2) (edge at 2 sqrt(q s2)); the Marchenko-Pastur
    law uses sigma2 = s2 and aspect ratio beta = q.
    """
    kind = kind.lower()
    if kind == "wigner":
        return Wigner(math.sqrt(ns.q * ns.s2))
    if kind == "mp":
        if ns.q == 0:
            raise ValueError("Marchenko-Pastur law needs a finite effective batch")
        return MarchenkoPastur(ns.s2, ns.q)
    raise ValueError(f"unknown law {kind!r}")


@dataclass(frozen=True)
class SpikePrediction:
    lambda_prime: float
    overlap_sq: float
    regime: Regime

    def as_dict(self) -> dict:
        return {
            "lambda_prime": self.lambda_prime,
            "overlap_sq": self.overlap_sq,
            "regime": self.regime.value,
        }


@dataclass(frozen=True)
class FfnArch:
    d_x: int
    d_y: int
    hidden_neurons: Sequence[int] = field(default_factory=tuple)
    P: int = 0

    def __post_init__(self):
        if self.d_x <= 0 or self.d_y <= 0 or self.P <= 0:
            raise ValueError("d_x, d_y and P must be positive")
        if any(n < 0 for n in self.hidden_neurons):
            raise ValueError("neuron counts must be nonnegative")


# --------------------------------------------------------------------------
# Semicircle
# --------------------------------------------------------------------------


def _check_sigma(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def semicircle_density(lam, sigma: float):
    """Semicircle density sqrt(4 sigma^2 - lam^2) / (2 pi sigma^2); 0 off support."""
    _check_sigma(sigma)
    lam = np.asarray(lam, dtype=float)
    inside = 4.0 * sigma**2 - lam**2
    out = np.where(inside > 0, np.sqrt(np.clip(inside, 0, None)) / (2 * np.pi * sigma**2), 0.0)
    return float(out) if out.ndim == 0 else out


def semicircle_stieltjes(z, sigma: float) -> complex:
    """Cauchy transform ``(z - sqrt(z^2 - 4 sigma^2)) / (2 sigma^2)``.

    The branch is chosen so that ``S(z) ~ 1/z`` as ``|z| -> inf``; for
    ``Im z > 0`` this gives ``-Im S / pi`` -> density.
    """
    _check_sigma(sigma)
    z = complex(z)
    edge = 2.0 * sigma
    if z.imag == 0 and -edge <= z.real <= edge:
        raise ValueError(f"z={z.real} lies on the support [-{edge}, {edge}]")
    # product of principal roots keeps the cut on [-2 sigma, 2 sigma]
    root = np.sqrt(z - edge) * np.sqrt(z + edge)
    # rationalised to avoid cancellation for large |z|
    return complex(2.0 / (z + root))


# --------------------------------------------------------------------------
# Spiked Wigner
# --------------------------------------------------------------------------


def wigner_spike(lambda1: float, ns: NoiseScale, tail: Tail | str = Tail.TOP) -> SpikePrediction:
    """Batch outlier predicted from a full-data outlier under additive noise.

    Works for any outlier, not only the extremal one.  Inputs exactly at the
    threshold are classified as absorbed.
    """
    tail = Tail(tail)
    if math.isinf(ns.b_eff):
        return SpikePrediction(float(lambda1), 1.0, Regime.SEPARATED)
    qs2 = ns.q * ns.s2
    thr = math.sqrt(qs2)
    sign = 1.0 if tail is Tail.TOP else -1.0
    if sign * lambda1 > thr:
        return SpikePrediction(
            lambda1 + qs2 / lambda1,
            1.0 - qs2 / lambda1**2,
            Regime.SEPARATED,
        )
    return SpikePrediction(sign * 2.0 * thr, 0.0, Regime.BULK_ABSORBED)


# --------------------------------------------------------------------------
# Marchenko-Pastur
# --------------------------------------------------------------------------


def mp_density(y, sigma2: float, beta: float):
    """Continuous part of the Marchenko-Pastur density with scale sigma2, ratio beta.

    sqrt(4 beta sigma2 y - (y - sigma2 (1 - beta))^2) / (2 pi beta sigma2 y).
    For beta > 1 the continuous part carries mass 1/beta; the atom at 0 is
    not represented.
    """
    if not sigma2 > 0 or not beta > 0:
        raise ValueError("sigma2 and beta must be positive")
    y = np.asarray(y, dtype=float)
    inside = 4 * beta * sigma2 * y - (y - sigma2 * (1 - beta)) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.sqrt(np.clip(inside, 0, None)) / (2 * np.pi * beta * sigma2 * y)
    out = np.where((inside > 0) & (y > 0), val, 0.0)
    return float(out) if out.ndim == 0 else out


def _mp_root(z: complex, sigma2: float, beta: float) -> complex:
    lo, hi = MarchenkoPastur(sigma2, beta).edges
    return np.sqrt(z - lo) * np.sqrt(z - hi)


def mp_stieltjes(z, sigma2: float, beta: float) -> complex:
    """Cauchy transform G(z) = int rho(t) / (z - t) dt of the MP law (atom included)."""
    z = complex(z)
    return (mp_t_transform(z, sigma2, beta) + 1) / z


def mp_t_transform(z, sigma2: float, beta: float) -> complex:
    """T(z) = int t / (z - t) dmu(t) = z G(z) - 1 for the MP law."""
    z = complex(z)
    root = _mp_root(z, sigma2, beta)
    # (z - s2(1+b) - root) / (2 b s2), rationalised
    return complex(2 * sigma2 / (z - sigma2 * (1 + beta) + root))


def mp_t_transform_single_root(z, sigma2: float, beta: float) -> complex:
    """T-transform with the discriminant (z + sigma2 (1-beta))^2 - 4 beta sigma2 z.

    Kept for the route comparison report only.  It coincides with
    :func:`mp_t_transform` only at beta = 1; elsewhere its branch points are
    not the MP support edges.
    """
    z = complex(z)
    disc = (z + sigma2 * (1 - beta)) ** 2 - 4 * beta * sigma2 * z
    return complex((z - sigma2 * (1 + beta) - np.sqrt(disc)) / (2 * beta * sigma2))


def _mp_overlap(lambda1: float, sigma2: float, beta: float) -> float:
    snr = lambda1 / sigma2
    return (1 - beta / snr**2) / (1 + beta / snr)


def _mp_spike_closed_form(lambda1: float, sigma2: float, beta: float) -> SpikePrediction:
    edge = 2 * sigma2 * (1 + beta)
    if lambda1 > sigma2 * (1 + beta):
        denom = 1 - beta * sigma2 / lambda1
        if denom <= 0:
            raise RegimeError(f"denominator {denom} <= 0 for lambda1={lambda1}")
        lp = (lambda1 + sigma2 * (1 - beta)) / denom
        return SpikePrediction(lp, _mp_overlap(lambda1, sigma2, beta), Regime.SEPARATED)
    return SpikePrediction(edge, 0.0, Regime.BULK_ABSORBED)


def _mp_spike_t(lambda1: float, sigma2: float, beta: float) -> SpikePrediction:
    """Solve T(lambda') = sigma2 / lambda1 for the MP T-transform.

    The equation is quadratic in the square root and has the closed-form
    solution (lambda1 + sigma2)(lambda1 + beta sigma2) / lambda1 above the
    threshold lambda1 > sqrt(beta) sigma2.
    """
    hi = MarchenkoPastur(sigma2, beta).edges[1]
    if lambda1 <= math.sqrt(beta) * sigma2:
        return SpikePrediction(hi, 0.0, Regime.BULK_ABSORBED)
    lp = (lambda1 + sigma2) * (lambda1 + beta * sigma2) / lambda1
    return SpikePrediction(lp, _mp_overlap(lambda1, sigma2, beta), Regime.SEPARATED)


def mp_spike(lambda1: float, ns: NoiseScale, route: str = DEFAULT_MP_ROUTE) -> SpikePrediction:
    """Top eigenvalue of a PSD (Gauss-Newton type) batch matrix.

    ``route="t_transform"`` solves T(lambda') = sigma2 / lambda1 for the MP
    T-transform (the Monte-Carlo-verified reference); ``route="closed_form"`` is the
    closed form (lambda1 + s2 (1 - q)) / (1 - q s2 / lambda1) with its
    threshold s2 (1 + q) and sub-threshold value 2 s2 (1 + q).
    """
    if not lambda1 > 0:
        raise ValueError(f"lambda1 must be positive, got {lambda1}")
    if route not in MP_ROUTES:
        raise ValueError(f"unknown route {route!r}; choose from {MP_ROUTES}")
    if math.isinf(ns.b_eff) or ns.s2 == 0:
        return SpikePrediction(float(lambda1), 1.0, Regime.SEPARATED)
    if route == "closed_form":
        return _mp_spike_closed_form(lambda1, ns.s2, ns.q)
    return _mp_spike_t(lambda1, ns.s2, ns.q)


def mp_spike_routes(lambda1: float, ns: NoiseScale) -> dict[str, SpikePrediction]:
    return {route: mp_spike(lambda1, ns, route) for route in MP_ROUTES}


# --------------------------------------------------------------------------
# Inversion
# --------------------------------------------------------------------------


def invert_spike(
    lambda_prime: float,
    ns: NoiseScale,
    law: str = "wigner",
    route: str = DEFAULT_MP_ROUTE,
) -> float:
    """Full-data outlier that maps to the observed batch outlier ``lambda_prime``."""
    law = law.lower()
    if math.isinf(ns.b_eff) or ns.s2 == 0:
        return float(lambda_prime)
    if law == "wigner":
        qs2 = ns.q * ns.s2
        edge = 2 * math.sqrt(qs2)
        if abs(lambda_prime) <= edge:
            raise NotInvertibleError(f"|{lambda_prime}| is not above the bulk edge {edge}")
        root = math.sqrt(lambda_prime**2 - 4 * qs2)
        return math.copysign((abs(lambda_prime) + root) / 2, lambda_prime)
    if law != "mp":
        raise ValueError(f"unknown law {law!r}")
    s2, beta = ns.s2, ns.q
    if route == "closed_form":
        # the closed form is not monotone when beta > 1; take the root on the
        # increasing branch, which must still lie in the separated regime
        c = lambda_prime - s2 * (1 - beta)
        disc = c * c - 4 * lambda_prime * beta * s2
        root = (c + math.sqrt(disc)) / 2 if disc >= 0 else -math.inf
        if root <= s2 * (1 + beta):
            raise NotInvertibleError(f"{lambda_prime} is not in the range of the separated branch")
        return root
    if route != "t_transform":
        raise ValueError(f"unknown route {route!r}")
    edge = MarchenkoPastur(s2, beta).edges[1]
    if lambda_prime <= edge:
        raise NotInvertibleError(f"{lambda_prime} is not above the bulk edge {edge}")
    c = lambda_prime - s2 * (1 + beta)
    return (c + math.sqrt(c * c - 4 * beta * s2 * s2)) / 2


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------


def trial_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent per-trial seed sequences; stable regardless of worker count."""
    return spawn(seed, n)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _orthonormal(rng: np.random.Generator, P: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((P, 0))
    q, r = np.linalg.qr(rng.standard_normal((P, k)))
    return q * np.sign(np.diag(r))


def sample_spiked_goe(
    P: int,
    sigma: float,
    spikes: Sequence[float] = (),
    seed=None,
    return_vectors: bool = False,
):
    """GOE matrix with off-diagonal variance sigma^2/P plus planted rank-k spikes.

    The bulk converges to the semicircle on [-2 sigma, 2 sigma].  With
    ``return_vectors`` the planted orthonormal directions (P x k) are returned
    as a second value.
    """
    if P < 2:
        raise ValueError("P must be at least 2")
    rng = _rng(seed)
    spikes = np.asarray(spikes, dtype=float).reshape(-1)
    if sigma > 0:
        g = rng.standard_normal((P, P))
        a = (g + g.T) * (sigma / math.sqrt(2.0 * P))
    else:
        a = np.zeros((P, P))
    u = _orthonormal(rng, P, spikes.size)
    if spikes.size:
        a += (u * spikes) @ u.T
        a = 0.5 * (a + a.T)
    return (a, u) if return_vectors else a


def sample_spiked_wishart(
    P: int,
    n: int,
    sigma: float,
    spikes: Sequence[float] = (),
    seed=None,
    return_vectors: bool = False,
):
    """(J + E)(J + E)^T with E_ij ~ N(0, sigma^2/n) and rank-k deterministic J.

    ``spikes`` are the nonzero eigenvalues of J J^T (so J has singular values
    sqrt(spike)).  Bulk follows MP with scale sigma^2 and ratio P/n.
    """
    if P < 2 or n < 1:
        raise ValueError("need P >= 2 and n >= 1")
    spikes = np.asarray(spikes, dtype=float).reshape(-1)
    if np.any(spikes < 0):
        raise ValueError("Wishart spikes are eigenvalues of J J^T and must be >= 0")
    rng = _rng(seed)
    x = rng.standard_normal((P, n)) * (sigma / math.sqrt(n)) if sigma > 0 else np.zeros((P, n))
    u = _orthonormal(rng, P, spikes.size)
    v = _orthonormal(rng, n, spikes.size)
    if spikes.size:
        x += (u * np.sqrt(spikes)) @ v.T
    w = x @ x.T
    w = 0.5 * (w + w.T)
    return (w, u) if return_vectors else w


def top_eigenpair(a: np.ndarray, seed=None) -> tuple[float, np.ndarray]:
    """Largest eigenvalue and unit eigenvector of a symmetric matrix.

    ARPACK with a seeded start vector, so repeated calls agree bit for bit.
    """
    a = np.asarray(a, dtype=float)
    P = a.shape[0]
    if P <= 64:
        w, v = np.linalg.eigh(a)
        return float(w[-1]), v[:, -1]
    v0 = _rng(seed).standard_normal(P)
    w, v = sparse_linalg.eigsh(a, k=1, which="LA", v0=v0, tol=1e-12)
    return float(w[0]), v[:, 0]


def spectral_moments(a: np.ndarray, kmax: int = 4) -> np.ndarray:
    """Normalised trace moments tr(A^k)/P for k = 1..kmax."""
    P = a.shape[0]
    out = np.empty(kmax)
    power = np.eye(P)
    for k in range(kmax):
        power = power @ a
        out[k] = np.trace(power) / P
    return out


# --------------------------------------------------------------------------
# Rank bound
# --------------------------------------------------------------------------


def rank_bound_ffn(arch: FfnArch) -> tuple[int, float]:
    """Hessian rank bound 4 d_y (sum N_l + d_x) and implied zero-eigenvalue mass."""
    bound = 4 * arch.d_y * (int(sum(arch.hidden_neurons)) + arch.d_x)
    return bound, max(0.0, 1.0 - bound / arch.P)
