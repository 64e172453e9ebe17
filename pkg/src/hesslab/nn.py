"""Small fully-connected ReLU networks with exact curvature products.

Parameters live in one flat float64 vector, layer-major: for each layer the
weight matrix (out x in, row-major) followed by its bias.  Gradients are
computed by hand-written backprop; Hessian-vector products use the
R-operator (forward-over-reverse) pass, and GGN products drop the
second-order terms of the network map.  ReLU's second derivative is taken as
zero everywhere, with f'(0) = 0.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .lanczos import MatrixOperator

PARAM_MAGIC = b"HESSLAB1"
EXACT_HESSIAN_CAP = 500


class Loss(str, enum.Enum):
    SOFTMAX_CE = "softmax_ce"
    SQUARED_ERROR = "squared_error"


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    loss: Loss = Loss.SOFTMAX_CE
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "loss", Loss(self.loss))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"need at least input and output widths >= 1, got {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError("only relu activations are supported")

    @property
    def d_x(self) -> int:
        return self.layer_widths[0]

    @property
    def d_y(self) -> int:
        return self.layer_widths[-1]

    @property
    def P(self) -> int:
        w = self.layer_widths
        return sum(w[i + 1] * w[i] + w[i + 1] for i in range(len(w) - 1))

    @property
    def shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    def to_json(self) -> str:
        return json.dumps(
            {"layer_widths": list(self.layer_widths), "loss": self.loss.value, "activation": self.activation},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MlpSpec":
        d = json.loads(text)
        return cls(tuple(d["layer_widths"]), Loss(d.get("loss", "softmax_ce")), d.get("activation", "relu"))


def unflatten(params: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer into the flat vector."""
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.P,):
        raise ValueError(f"expected a flat vector of length {spec.P}, got {params.shape}")
    layers, k = [], 0
    for out, inp in spec.shapes:
        W = params[k : k + out * inp].reshape(out, inp)
        k += out * inp
        b = params[k : k + out]
        k += out
        layers.append((W, b))
    return layers


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(spec: MlpSpec, seed=None, scale: float = 1.0) -> np.ndarray:
    """Gaussian weights with std scale/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for out, inp in spec.shapes:
        W = rng.standard_normal((out, inp)) * (scale / np.sqrt(inp))
        layers.append((W, np.zeros(out)))
    return flatten(layers)


def save_params(path, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.tobytes())


def load_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}")
    (P,) = struct.unpack("<Q", blob[8:16])
    data = np.frombuffer(blob[16:], dtype="<f8")
    if data.size != P:
        raise ValueError(f"{path}: header says {P} parameters, found {data.size}")
    return data.astype(float)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.asarray(self.labels)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("inputs and labels disagree on N")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_x(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.labels.ndim == 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])

    def to_csv(self) -> str:
        if not self.is_classification:
            raise ValueError("CSV export supports integer class labels only")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{i}" for i in range(self.d_x)] + ["label"])
        for x, y in zip(self.inputs, self.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[-1] != "label":
            raise ValueError("last CSV column must be 'label'")
        x = np.array([[float(v) for v in r[:-1]] for r in body])
        y = np.array([int(r[-1]) for r in body])
        return cls(x, y)


def _class_means(rng: np.random.Generator, k: int, d_x: int, max_tries: int = 10_000) -> np.ndarray:
    means = []
    tries = 0
    while len(means) < k:
        m = rng.standard_normal(d_x)
        m /= np.linalg.norm(m)
        if all(m @ o < 0.5 for o in means) or d_x == 1 or tries > max_tries:
            means.append(m)
        tries += 1
    return np.array(means)


def gaussian_mixture(k: int = 10, d_x: int = 20, n_per_class: int = 100, separation: float = 3.0, seed=None) -> Dataset:
    """Unit-covariance Gaussian classes centred at separation * m_i, |m_i| = 1.

    Class directions are resampled until their pairwise dot products are
    below 0.5 (not achievable in every dimension; gives up after 10k tries).
    """
    rng = np.random.default_rng(seed)
    means = separation * _class_means(rng, k, d_x)
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[labels] + rng.standard_normal((k * n_per_class, d_x))
    perm = rng.permutation(len(labels))
    return Dataset(x[perm], labels[perm])


def batch_stream(data: Dataset, B: int, seed=None, epochs: int | None = 1) -> Iterator[Dataset]:
    """Shuffled without-replacement batches; the short tail batch is kept."""
    if not 1 <= B <= data.N:
        raise ValueError(f"need 1 <= B <= N={data.N}, got {B}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(data.N)
        for start in range(0, data.N, B):
            yield data.subset(perm[start : start + B])
        epoch += 1


def sample_batch(data: Dataset, B: int, rng: np.random.Generator) -> Dataset:
    return data.subset(rng.choice(data.N, size=B, replace=False))


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _targets(spec: MlpSpec, labels: np.ndarray) -> np.ndarray:
    if labels.ndim == 2:
        return labels.astype(float)
    onehot = np.zeros((labels.shape[0], spec.d_y))
    onehot[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return onehot


def _softmax(f: np.ndarray) -> np.ndarray:
    z = f - f.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class _Cache:
    acts: list  # a_0 .. a_{L-1} (inputs to each layer)
    masks: list  # relu'(z_l) for hidden layers
    out: np.ndarray
    y: np.ndarray
    B: int = field(default=0)


def _forward(layers, spec: MlpSpec, batch: Dataset) -> _Cache:
    a = batch.inputs
    if a.shape[1] != spec.d_x:
        raise ValueError(f"batch has {a.shape[1]} features, model expects {spec.d_x}")
    acts, masks = [], []
    for i, (W, b) in enumerate(layers):
        acts.append(a)
        z = a @ W.T + b
        if i < len(layers) - 1:
            mask = (z > 0).astype(float)
            masks.append(mask)
            a = z * mask
        else:
            a = z
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite network outputs")
    return _Cache(acts, masks, a, _targets(spec, batch.labels), batch.inputs.shape[0])


def predict(params, spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    layers = unflatten(params, spec)
    dummy = Dataset(inputs, np.zeros(len(inputs), dtype=int))
    return _forward(layers, spec, dummy).out


def _loss_value(spec: MlpSpec, out: np.ndarray, y: np.ndarray) -> float:
    if spec.loss is Loss.SOFTMAX_CE:
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-np.mean(np.sum(y * logp, axis=1)))
    return float(0.5 * np.mean(np.sum((out - y) ** 2, axis=1)))


def _output_grad(spec: MlpSpec, out: np.ndarray, y: np.ndarray, B: int) -> np.ndarray:
    if spec.loss is Loss.SOFTMAX_CE:
        return (_softmax(out) - y) / B
    return (out - y) / B


def _output_hvp(spec: MlpSpec, out: np.ndarray, r_out: np.ndarray, B: int) -> np.ndarray:
    """Loss Hessian w.r.t. the outputs applied to r_out (per sample, /B)."""
    if spec.loss is Loss.SOFTMAX_CE:
        p = _softmax(out)
        return (p * r_out - p * np.sum(p * r_out, axis=1, keepdims=True)) / B
    return r_out / B


def batch_loss(params, spec: MlpSpec, batch: Dataset) -> float:
    """Mean per-sample loss over the batch."""
    cache = _forward(unflatten(params, spec), spec, batch)
    loss = _loss_value(spec, cache.out, cache.y)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss


def _backward(layers, cache: _Cache, delta: np.ndarray) -> list:
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (delta.T @ cache.acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W) * cache.masks[i - 1]
    return grads


def gradient(params, spec: MlpSpec, batch: Dataset) -> np.ndarray:
    layers = unflatten(params, spec)
    cache = _forward(layers, spec, batch)
    delta = _output_grad(spec, cache.out, cache.y, cache.B)
    return flatten(_backward(layers, cache, delta))


def loss_and_gradient(params, spec: MlpSpec, batch: Dataset) -> tuple[float, np.ndarray]:
    layers = unflatten(params, spec)
    cache = _forward(layers, spec, batch)
    loss = _loss_value(spec, cache.out, cache.y)
    delta = _output_grad(spec, cache.out, cache.y, cache.B)
    return loss, flatten(_backward(layers, cache, delta))


def _r_forward(layers, vlayers, cache: _Cache) -> list:
    """Directional derivatives R{a_l} of layer inputs plus R{f} (last entry)."""
    r_acts = [np.zeros_like(cache.acts[0])]
    r = None
    for i, ((W, _), (V, vb)) in enumerate(zip(layers, vlayers)):
        r = r_acts[i] @ W.T + cache.acts[i] @ V.T + vb
        if i < len(layers) - 1:
            r = r * cache.masks[i]
            r_acts.append(r)
    r_acts.append(r)
    return r_acts


def _curvature_product(params, spec: MlpSpec, batch: Dataset, v, gauss_newton: bool) -> np.ndarray:
    layers = unflatten(params, spec)
    vlayers = unflatten(np.asarray(v, dtype=float), spec)
    cache = _forward(layers, spec, batch)
    r_acts = _r_forward(layers, vlayers, cache)
    r_out = r_acts[-1]
    r_delta = _output_hvp(spec, cache.out, r_out, cache.B)
    delta = None if gauss_newton else _output_grad(spec, cache.out, cache.y, cache.B)

    out = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        V, _ = vlayers[i]
        gW = r_delta.T @ cache.acts[i]
        if not gauss_newton:
            gW = gW + delta.T @ r_acts[i]
        out[i] = (gW, r_delta.sum(axis=0))
        if i > 0:
            mask = cache.masks[i - 1]
            back = r_delta @ W
            if not gauss_newton:
                back = back + delta @ V
                delta = (delta @ W) * mask
            r_delta = back * mask
    return flatten(out)


def hvp(params, spec: MlpSpec, batch: Dataset, v) -> np.ndarray:
    """Exact Hessian-vector product of :func:`batch_loss`."""
    return _curvature_product(params, spec, batch, v, gauss_newton=False)


def ggn_vp(params, spec: MlpSpec, batch: Dataset, v) -> np.ndarray:
    """Generalised Gauss-Newton product J^T H_out J v (positive semidefinite)."""
    return _curvature_product(params, spec, batch, v, gauss_newton=True)


def hessian_operator(params, spec: MlpSpec, batch: Dataset, kind: str = "hessian") -> MatrixOperator:
    params = np.array(params, dtype=float)
    if kind == "hessian":
        return MatrixOperator(spec.P, lambda v: hvp(params, spec, batch, v))
    if kind == "ggn":
        return MatrixOperator(spec.P, lambda v: ggn_vp(params, spec, batch, v))
    raise ValueError(f"unknown curvature kind {kind!r}")


def per_sample_operators(params, spec: MlpSpec, data: Dataset, kind: str = "hessian") -> Iterator[MatrixOperator]:
    """Lazily yields the curvature operator of each individual sample."""
    for i in range(data.N):
        yield hessian_operator(params, spec, data.subset(slice(i, i + 1)), kind)


def dense_curvature(params, spec: MlpSpec, batch: Dataset, kind: str = "hessian", cap: int = EXACT_HESSIAN_CAP) -> np.ndarray:
    """Dense curvature matrix; column j is the product with e_j."""
    if spec.P > cap:
        raise ValueError(f"P={spec.P} exceeds the dense cap {cap}")
    op = hessian_operator(params, spec, batch, kind)
    eye = np.eye(spec.P)
    return np.column_stack([op.apply(eye[:, j]) for j in range(spec.P)])


def exact_hessian(params, spec: MlpSpec, batch: Dataset, cap: int = EXACT_HESSIAN_CAP) -> np.ndarray:
    return dense_curvature(params, spec, batch, "hessian", cap)


def accuracy(params, spec: MlpSpec, data: Dataset) -> float:
    out = predict(params, spec, data.inputs)
    if data.is_classification:
        return float(np.mean(out.argmax(axis=1) == data.labels))
    return float(np.mean(out.argmax(axis=1) == data.labels.argmax(axis=1)))
