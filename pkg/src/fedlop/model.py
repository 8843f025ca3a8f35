"""Client network with a shared global part, a private local part and a private head.

The head consumes the concatenation ``[global(f*) ; local(f*) ; f']``. When
MPP is disabled both parts read the full feature vector and the head only sees
``[global ; local]``. Baseline networks have no local part.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .nn_core import (MlpParams, MlpSpec, OptimizerState, ShapeError, cross_entropy,
                      flatten_params, mlp_backward, mlp_forward, mlp_init, sgd_momentum_step,
                      softmax, unflatten_params)

log = logging.getLogger(__name__)

GROUPS = ("global_part", "local_part", "head")
N_CLASSES = 5


class DegeneratePenaltyError(ValueError):
    """The subspace penalty has no gradient where both parts coincide."""


@dataclass
class HyperParams:
    lsl_weight: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.5
    local_steps: int = 15
    lsl_enabled: bool = True
    mpp_enabled: bool = True
    batch_size: int | None = 16

    def __post_init__(self):
        if self.lsl_weight < 0:
            raise ValueError("lsl_weight must be >= 0")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class SubNet:
    spec: MlpSpec
    params: MlpParams
    opt: OptimizerState

    def copy(self) -> "SubNet":
        return SubNet(self.spec, self.params.copy(),
                      OptimizerState(self.opt.velocity.copy(), self.opt.learning_rate,
                                     self.opt.momentum))

    def flat(self) -> np.ndarray:
        return flatten_params(self.params)


@dataclass
class ClientNetwork:
    global_part: SubNet
    head: SubNet
    local_part: SubNet | None = None
    mpp_enabled: bool = True
    dim_fprime: int = 0

    def __post_init__(self):
        g, l, h = self.global_part, self.local_part, self.head
        if l is not None and l.spec != g.spec:
            raise ShapeError("global and local parts must share one architecture")
        expected = g.spec.n_out * (1 if l is None else 2) + (self.dim_fprime if self.mpp_enabled else 0)
        if h.spec.n_in != expected:
            raise ShapeError(f"head input {h.spec.n_in} != expected {expected}")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if getattr(self, g) is not None)

    def part(self, name: str) -> SubNet:
        sub = getattr(self, name)
        if sub is None:
            raise KeyError(f"network has no {name}")
        return sub

    def copy(self) -> "ClientNetwork":
        return ClientNetwork(self.global_part.copy(), self.head.copy(),
                             None if self.local_part is None else self.local_part.copy(),
                             self.mpp_enabled, self.dim_fprime)

    def n_params(self) -> int:
        return sum(self.part(g).spec.n_params for g in self.groups)


def build_network(dim_fstar: int, dim_fprime: int, rng: np.random.Generator, *,
                  with_local: bool = True, mpp_enabled: bool = True,
                  hidden: tuple[int, ...] = (22, 11, 6), head_hidden: tuple[int, ...] = (20, 13),
                  n_classes: int = N_CLASSES, learning_rate: float = 0.01,
                  momentum: float = 0.5) -> ClientNetwork:
    """Randomly initialised client network.

    Parts are drawn from ``rng`` in the fixed order global, local, head, so two
    calls with equal seeds give identical networks.
    """
    sub_in = dim_fstar if mpp_enabled else dim_fstar + dim_fprime
    sub_spec = MlpSpec((sub_in, *hidden))
    head_in = sub_spec.n_out * (2 if with_local else 1) + (dim_fprime if mpp_enabled else 0)
    head_spec = MlpSpec((head_in, *head_hidden, n_classes), output="softmax")

    def make(spec):
        p = mlp_init(spec, rng)
        return SubNet(spec, p, OptimizerState.fresh(p, learning_rate, momentum))

    g = make(sub_spec)
    l = make(sub_spec) if with_local else None
    h = make(head_spec)
    return ClientNetwork(g, h, l, mpp_enabled, dim_fprime)


def _sub_input(net: ClientNetwork, f_star: np.ndarray, f_prime: np.ndarray) -> np.ndarray:
    return f_star if net.mpp_enabled else np.hstack([f_star, f_prime])


def client_forward(net: ClientNetwork, f_star, f_prime):
    """Class probabilities plus the traces needed for backprop.

    Inputs may be single vectors or (N, dim) batches.
    """
    fs = np.atleast_2d(np.asarray(f_star, dtype=np.float64))
    fp = np.atleast_2d(np.asarray(f_prime, dtype=np.float64))
    if fp.shape[1] != net.dim_fprime:
        raise ShapeError(f"f_prime has {fp.shape[1]} columns, network expects {net.dim_fprime}")
    if fs.shape[0] != fp.shape[0]:
        raise ShapeError("f_star and f_prime batch sizes differ")
    x = _sub_input(net, fs, fp)
    traces = {}
    pieces = []
    for name in ("global_part", "local_part"):
        sub = getattr(net, name)
        if sub is None:
            continue
        traces[name], r = mlp_forward(sub.params, sub.spec, x)
        pieces.append(r)
    if net.mpp_enabled:
        pieces.append(fp)
    traces["head"], logits = mlp_forward(net.head.params, net.head.spec, np.hstack(pieces))
    probs = softmax(logits)
    if np.ndim(f_star) == 1:
        probs = probs[0]
    return probs, traces


def lsl_penalty(w_tilde, w_hat, *, return_flag: bool = False):
    """exp(-|w~ - w^| / (|w~| + |w^|)) over flattened parameter vectors.

    Lies in (0, 1]; 1 exactly when the two vectors coincide. Both-zero input is
    defined as 1.0 and reported through the flag.
    """
    a = np.asarray(w_tilde, dtype=np.float64)
    b = np.asarray(w_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"penalty operands differ in length: {a.shape} vs {b.shape}")
    s = np.linalg.norm(a) + np.linalg.norm(b)
    degenerate = s == 0.0
    if degenerate:
        warnings.warn("subspace penalty evaluated at two all-zero vectors", RuntimeWarning)
        value = 1.0
    else:
        value = math.exp(-np.linalg.norm(a - b) / s)
    return (value, degenerate) if return_flag else value


def lsl_penalty_grads(w_tilde, w_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(w_tilde, dtype=np.float64)
    b = np.asarray(w_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"penalty operands differ in length: {a.shape} vs {b.shape}")
    diff = a - b
    d = np.linalg.norm(diff)
    if d == 0.0:
        raise DegeneratePenaltyError("penalty is not differentiable where w~ == w^")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    s = na + nb
    e = math.exp(-d / s)
    unit = diff / d
    # a zero operand contributes the zero subgradient of its norm
    ua = a / na if na > 0 else np.zeros_like(a)
    ub = b / nb if nb > 0 else np.zeros_like(b)
    grad_a = -e * (unit * s - d * ua) / (s * s)
    grad_b = -e * (-unit * s - d * ub) / (s * s)
    return grad_a, grad_b


def _penalty_active(net: ClientNetwork, hp: HyperParams) -> bool:
    return hp.lsl_enabled and hp.lsl_weight > 0 and net.local_part is not None


def client_loss(net: ClientNetwork, batch, hp: HyperParams) -> float:
    """Summed cross-entropy over the batch plus the weighted subspace penalty."""
    f_star, f_prime, labels = batch
    if len(labels) == 0:
        raise ValueError("empty batch")
    probs, _ = client_forward(net, np.atleast_2d(f_star), np.atleast_2d(f_prime))
    loss, _ = cross_entropy(np.atleast_2d(probs), np.asarray(labels))
    if _penalty_active(net, hp):
        loss += hp.lsl_weight * lsl_penalty(net.global_part.flat(), net.local_part.flat())
    return loss


def loss_and_grads(net: ClientNetwork, batch, hp: HyperParams, *, mu_prox: float = 0.0,
                   prox_ref: dict[str, np.ndarray] | None = None):
    """Objective value and per-group parameter gradients.

    ``prox_ref`` maps group name to the flattened server copy; when given with
    ``mu_prox`` > 0 the proximal term is added for those groups.
    """
    f_star, f_prime, labels = batch
    fs = np.atleast_2d(np.asarray(f_star, dtype=np.float64))
    fp = np.atleast_2d(np.asarray(f_prime, dtype=np.float64))
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    probs, traces = client_forward(net, fs, fp)
    loss, dlogits = cross_entropy(probs, labels)
    grads: dict[str, MlpParams] = {}
    grads["head"], dhead_in = mlp_backward(net.head.params, net.head.spec, traces["head"], dlogits)
    width = net.global_part.spec.n_out
    offset = 0
    for name in ("global_part", "local_part"):
        sub = getattr(net, name)
        if sub is None:
            continue
        upstream = dhead_in[:, offset:offset + width]
        offset += width
        grads[name], _ = mlp_backward(sub.params, sub.spec, traces[name], upstream)

    if _penalty_active(net, hp):
        wg, wl = net.global_part.flat(), net.local_part.flat()
        loss += hp.lsl_weight * lsl_penalty(wg, wl)
        try:
            gg, gl = lsl_penalty_grads(wg, wl)
        except DegeneratePenaltyError:
            log.debug("parts coincide; penalty gradient skipped this step")
        else:
            for name, g in (("global_part", gg), ("local_part", gl)):
                spec = net.part(name).spec
                grads[name] = _add_flat(grads[name], hp.lsl_weight * g, spec)

    if mu_prox and prox_ref:
        for name, ref in prox_ref.items():
            w = net.part(name).flat()
            value, g = fedprox_penalty(w, ref, mu_prox)
            loss += value
            grads[name] = _add_flat(grads[name], g, net.part(name).spec)
    return loss, grads


def fedprox_penalty(w, w_server, mu_prox: float) -> tuple[float, np.ndarray]:
    """(mu/2)|w - w_server|^2 and its gradient."""
    a = np.asarray(w, dtype=np.float64)
    b = np.asarray(w_server, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"proximal operands differ in length: {a.shape} vs {b.shape}")
    diff = a - b
    return 0.5 * mu_prox * float(diff @ diff), mu_prox * diff


def _add_flat(g: MlpParams, extra: np.ndarray, spec: MlpSpec) -> MlpParams:
    return unflatten_params(flatten_params(g) + extra, spec)


def client_local_update(net: ClientNetwork, train_set, hp: HyperParams,
                        frozen_global: dict[str, np.ndarray] | None = None, *,
                        mu_prox: float = 0.0, schedule: list[tuple[str, ...]] | None = None,
                        rng: np.random.Generator | None = None) -> ClientNetwork:
    """Run local SGD-momentum steps and return the updated copy of ``net``.

    ``schedule`` lists, per step, which groups are trainable; by default every
    group is trained jointly for ``hp.local_steps`` steps. ``frozen_global``
    is the server copy used by the proximal term. Velocities start from zero
    on every call.
    """
    f_star, f_prime, labels = train_set
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    if schedule is None:
        schedule = [net.groups] * hp.local_steps
    out = net.copy()
    for name in out.groups:
        sub = out.part(name)
        sub.opt = OptimizerState.fresh(sub.params, hp.learning_rate, hp.momentum)
    if hp.learning_rate == 0 or not schedule:
        return out
    if hp.batch_size is not None and hp.batch_size < n and rng is None:
        raise ValueError("mini-batching needs an rng")
    for active in schedule:
        if hp.batch_size is not None and hp.batch_size < n:
            idx = np.sort(rng.choice(n, size=hp.batch_size, replace=False))
            batch = (f_star[idx], f_prime[idx], labels[idx])
        else:
            batch = train_set
        _, grads = loss_and_grads(out, batch, hp, mu_prox=mu_prox, prox_ref=frozen_global)
        for name in active:
            sub = out.part(name)
            sub.params, sub.opt = sgd_momentum_step(sub.params, grads[name], sub.opt)
    return out

