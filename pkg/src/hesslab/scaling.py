"""Learning-rate scaling rules and batch-curvature prediction."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import lanczos, nn
from ._random import spawn
from .rmt import NoiseScale, SpikePrediction, effective_batch, mp_spike, wigner_spike


class RuleKind(str, enum.Enum):
    LINEAR_SGD = "linear"
    SQRT_ADAPTIVE = "sqrt"


@dataclass(frozen=True)
class ScalingRule:
    kind: RuleKind
    base_lr: float
    base_batch: int
    threshold_b: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.base_batch < 1:
            raise ValueError("base_batch must be >= 1")
        if self.threshold_b is not None and not self.threshold_b > 0:
            raise ValueError("threshold_b must be positive when given")


def max_lr_sgd(lambda1_batch: float) -> float:
    """Largest step keeping the second-order loss change negative: 2 / lambda'."""
    if not lambda1_batch > 0:
        raise ValueError(f"lambda1_batch must be positive, got {lambda1_batch}")
    return 2.0 / lambda1_batch


def predict_batch_lambda(
    lambda1_full: float,
    s2: float,
    P: int,
    B: int,
    N: float,
    law: str = "wigner",
    route: str | None = None,
) -> SpikePrediction:
    ns = NoiseScale(P=P, B=B, N=N, s2=s2)
    if law == "wigner":
        return wigner_spike(lambda1_full, ns)
    if law == "mp":
        return mp_spike(lambda1_full, ns) if route is None else mp_spike(lambda1_full, ns, route)
    raise ValueError(f"unknown law {law!r}")


def scale_lr(rule: ScalingRule, B: int) -> float:
    """Learning rate for batch size B; growth stops at the threshold batch if set."""
    if B < 1:
        raise ValueError("B must be >= 1")
    b = float(B) if rule.threshold_b is None else min(float(B), rule.threshold_b)
    if rule.kind is RuleKind.LINEAR_SGD:
        return rule.base_lr * b / rule.base_batch
    return rule.base_lr * math.sqrt(b / rule.base_batch)


def threshold_batch(lambda1_full: float, s2: float, P: int, N: float = math.inf) -> tuple[float, float]:
    """Effective and actual batch at which the noise shift equals lambda1.

    Returns ``(b_star, B_star)`` with b_star = P s2 / lambda1^2 and
    B_star = b_star / (1 + b_star / N).
    """
    if not lambda1_full > 0:
        raise ValueError("lambda1_full must be positive")
    if s2 < 0:
        raise ValueError("s2 must be nonnegative")
    b_star = P * s2 / lambda1_full**2
    B_star = b_star if math.isinf(N) else b_star / (1 + b_star / N)
    return b_star, B_star


def adaptive_max_lr(kappa: float, s2: float, P: int, b_eff: float) -> float:
    """Square-root bound sqrt(b) kappa / (sqrt(P) sqrt(s2)); inf when s2 = 0."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if s2 == 0 or math.isinf(b_eff):
        return math.inf
    return math.sqrt(b_eff) * kappa / (math.sqrt(P) * math.sqrt(s2))


def edge_vs_outlier_condition(eta_i: float, eta_j: float, delta: float, lambda_j: float, ns: NoiseScale) -> bool:
    """True when stepping along a bulk-edge direction raises the loss more than the outlier.

    Compares (eta_j + delta)/(eta_i + delta) with
    lambda_j sqrt(b)/(sqrt(P) s) + sqrt(P) s/(sqrt(b) lambda_j).
    """
    scale = math.sqrt(ns.q * ns.s2)
    if not lambda_j > scale:
        raise ValueError("lambda_j must be an outlier (above sqrt(P/b) * s)")
    rhs = lambda_j / scale + scale / lambda_j
    return (eta_j + delta) / (eta_i + delta) > rhs


# --------------------------------------------------------------------------
# Pipeline: full-data curvature -> predicted and measured batch curvature
# --------------------------------------------------------------------------


@dataclass
class CurvatureReport:
    lambda1_full: float
    lambda1_batch_predicted: float
    lambda1_batch_measured_mean: float
    lambda1_batch_measured_std: float
    s2: float
    b_eff: float
    P: int = 0
    B: int = 0
    N: int = 0
    law: str = "wigner"
    regime: str = ""
    measured: list[float] | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["b_eff"]):
            d["b_eff"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)


def estimate_s2(params, spec: nn.MlpSpec, data: nn.Dataset, kind: str = "hessian", seed=None, n_vectors: int = 1) -> float:
    """Per-element variance from the streaming variance estimator (averaged over probes)."""
    seeds = spawn(seed, n_vectors)
    outs = []
    for ss in seeds:
        v = lanczos.random_unit_vector(spec.P, ss)
        outs.append(lanczos.hessian_variance(nn.per_sample_operators(params, spec, data, kind), v))
    return lanczos.per_element_variance(float(np.mean(outs)), spec.P)


def curvature_report(
    params,
    spec: nn.MlpSpec,
    data: nn.Dataset,
    B: int,
    n_batches: int = 10,
    m: int = 100,
    kind: str = "hessian",
    law: str = "wigner",
    seed=None,
    s2_vectors: int = 1,
) -> CurvatureReport:
    """Predicted vs measured top eigenvalue of the batch curvature.

    The full-data top eigenvalue and per-element variance feed the spike
    prediction; the measurement is the top Ritz value over ``n_batches``
    random without-replacement batches.
    """
    ss_full, ss_var, ss_batches = spawn(seed, 3)
    m_eff = min(m, spec.P)
    full_op = nn.hessian_operator(params, spec, data, kind)
    lam_full, _ = lanczos.extremal_eigenvalues(full_op, m_eff, seed=ss_full)
    s2 = estimate_s2(params, spec, data, kind, seed=ss_var, n_vectors=s2_vectors)
    pred = predict_batch_lambda(lam_full, s2, spec.P, B, data.N, law)

    rng = np.random.default_rng(ss_batches)
    measured = []
    for child in ss_batches.spawn(n_batches):
        batch = nn.sample_batch(data, B, rng)
        top, _ = lanczos.extremal_eigenvalues(nn.hessian_operator(params, spec, batch, kind), m_eff, seed=child)
        measured.append(top)
    measured = np.array(measured)
    return CurvatureReport(
        lambda1_full=lam_full,
        lambda1_batch_predicted=pred.lambda_prime,
        lambda1_batch_measured_mean=float(measured.mean()),
        lambda1_batch_measured_std=float(measured.std(ddof=1)) if n_batches > 1 else 0.0,
        s2=s2,
        b_eff=effective_batch(B, data.N),
        P=spec.P,
        B=B,
        N=data.N,
        law=law,
        regime=pred.regime.value,
        measured=[float(x) for x in measured],
    )


def max_lr_curve(lambda1_full: float, s2: float, P: int, batch_sizes, N: float = math.inf, law: str = "wigner") -> np.ndarray:
    """Stable SGD step 2/lambda'(B) along a batch-size sweep."""
    return np.array([max_lr_sgd(predict_batch_lambda(lambda1_full, s2, P, int(B), N, law).lambda_prime) for B in batch_sizes])
