"""Small deterministic dense-network engine in float64 numpy.

Parameters are plain lists of weight matrices (fan_out x fan_in) and bias
vectors. Everything here is functional: operations return new arrays and
never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input arrays do not match the network they are used with."""


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output not in ("linear", "softmax"):
            raise ValueError(f"unsupported output {self.output!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def check(self, spec: MlpSpec) -> None:
        if len(self.weights) != len(spec.shapes) or len(self.biases) != len(spec.shapes):
            raise ShapeError("layer count does not match spec")
        for w, b, (o, i) in zip(self.weights, self.biases, spec.shapes):
            if w.shape != (o, i) or b.shape != (o,):
                raise ShapeError(f"expected ({o}, {i}) / ({o},), got {w.shape} / {b.shape}")


# Gradients live in the same container as the parameters they differentiate.
Gradients = MlpParams


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # input to each affine layer
    pre: list[np.ndarray]  # affine outputs, one per layer


@dataclass
class OptimizerState:
    velocity: MlpParams
    learning_rate: float = 0.01
    momentum: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, params: MlpParams, learning_rate: float = 0.01,
              momentum: float = 0.5) -> "OptimizerState":
        return cls(params.zeros_like(), learning_rate, momentum)


def seeded_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Deterministic generator; a tuple seed derives independent child streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def mlp_init(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Xavier-uniform weights, zero biases."""
    weights, biases = [], []
    for o, i in spec.shapes:
        bound = np.sqrt(6.0 / (i + o))
        weights.append(rng.uniform(-bound, bound, size=(o, i)))
        biases.append(np.zeros(o))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, spec: MlpSpec, batch: np.ndarray) -> tuple[ForwardTrace, np.ndarray]:
    """Run a batch (rows are samples) through the net.

    Hidden layers are affine + ReLU, the last layer is affine only; softmax is
    left to the loss.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ShapeError(f"batch of shape {x.shape} does not fit input size {spec.n_in}")
    inputs, pre = [], []
    a = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = z if l == last else np.maximum(z, 0.0)
    return ForwardTrace(inputs, pre), a


def mlp_backward(params: MlpParams, spec: MlpSpec, trace: ForwardTrace,
                 dlogits: np.ndarray) -> tuple[Gradients, np.ndarray]:
    """Reverse-mode gradients for a summed loss.

    Returns the parameter gradients and the gradient with respect to the
    network input, so callers can chain through concatenated inputs.
    """
    if len(trace.pre) != len(params.weights):
        raise ShapeError("trace does not belong to these parameters")
    g = np.asarray(dlogits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.pre[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} vs output {trace.pre[-1].shape}")
    n_layers = len(params.weights)
    dw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for l in range(n_layers - 1, -1, -1):
        if l != n_layers - 1:
            g = g * (trace.pre[l] > 0.0)
        dw[l] = g.T @ trace.inputs[l]
        db[l] = g.sum(axis=0)
        g = g @ params.weights[l]
    return MlpParams(dw, db), g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Summed cross-entropy and the fused softmax+CE logit gradient.

    Accepts a single probability vector with an int target, or a (N, C)
    matrix with N targets.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p2 = p[None, :] if single else p
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (p2.shape[0],) or not np.issubdtype(t.dtype, np.integer):
        raise ValueError("need one integer target per probability row")
    if t.size and (t.min() < 0 or t.max() >= p2.shape[1]):
        raise ValueError(f"target class out of range [0, {p2.shape[1]})")
    rows = np.arange(p2.shape[0])
    loss = float(-np.log(np.maximum(p2[rows, t], 1e-12)).sum())
    d = p2.copy()
    d[rows, t] -= 1.0
    return loss, (d[0] if single else d)


def sgd_momentum_step(params: MlpParams, grads: Gradients,
                      state: OptimizerState) -> tuple[MlpParams, OptimizerState]:
    """Classic momentum: v <- mu*v + g ; w <- w - lr*v."""
    mu, lr = state.momentum, state.learning_rate
    vw = [mu * v + g for v, g in zip(state.velocity.weights, grads.weights)]
    vb = [mu * v + g for v, g in zip(state.velocity.biases, grads.biases)]
    new = MlpParams([w - lr * v for w, v in zip(params.weights, vw)],
                    [b - lr * v for b, v in zip(params.biases, vb)])
    return new, OptimizerState(MlpParams(vw, vb), lr, mu)


def flatten_params(params: MlpParams) -> np.ndarray:
    """Layers in order; per layer the weight matrix row-major, then the bias."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ravel(w, order="C"))
        parts.append(np.ravel(b))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts).astype(np.float64, copy=False)


def unflatten_params(vector: np.ndarray, spec: MlpSpec) -> MlpParams:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (spec.n_params,):
        raise ShapeError(f"vector of length {v.size} does not fit {spec.n_params} parameters")
    weights, biases, pos = [], [], 0
    for o, i in spec.shapes:
        weights.append(v[pos:pos + o * i].reshape(o, i).copy())
        pos += o * i
        biases.append(v[pos:pos + o].copy())
        pos += o
    return MlpParams(weights, biases)


def finite_diff_gradient(loss_fn: Callable, params, eps: float = 1e-6, spec: MlpSpec | None = None):
    """Central-difference gradient of a scalar function.

    ``params`` is either a flat array (``loss_fn`` takes arrays) or MlpParams
    together with ``spec`` (``loss_fn`` then takes MlpParams).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(params, MlpParams):
        if spec is None:
            raise ValueError("spec is required to perturb MlpParams")
        flat = flatten_params(params)
        g = finite_diff_gradient(lambda v: loss_fn(unflatten_params(v, spec)), flat, eps)
        return unflatten_params(g, spec)
    x = np.array(params, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = loss_fn(x)
        x[idx] = orig - eps
        fm = loss_fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad
