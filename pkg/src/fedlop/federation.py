"""Round engine: participant sampling, local updates, aggregation of shared groups."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import EncodedSet
from .metrics import Metrics, evaluate
from .model import GROUPS, ClientNetwork, HyperParams, build_network, client_local_update
from .nn_core import flatten_params, seeded_rng, unflatten_params

log = logging.getLogger(__name__)

STRATEGIES = ("fecmap", "fecmap_lsl", "fecmap_mpp", "fedavg", "fedprox", "fedper", "lgfed", "fedrep")
AGGREGATION_MODES = ("participants_mean", "all_clients_stale_mean")


class RoundAborted(RuntimeError):
    """No participant delivered an upload."""


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    """A federated method as a split of parameter groups plus a local schedule.

    ``private`` overrides the method's default private groups; the shared set
    is always the complement within the network's groups.
    """

    name: str = "fecmap"
    mu_prox: float = 0.0
    private: tuple[str, ...] | None = None
    body_steps: int = 1

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")
        if self.mu_prox < 0:
            raise ValueError("mu_prox must be >= 0")

    @property
    def is_fecmap(self) -> bool:
        return self.name.startswith("fecmap")

    def adjust(self, hp: HyperParams) -> HyperParams:
        """Ablation switches: fecmap_lsl drops MPP, fecmap_mpp drops the penalty."""
        if self.name == "fecmap_lsl":
            return replace(hp, mpp_enabled=False, lsl_enabled=True)
        if self.name == "fecmap_mpp":
            return replace(hp, lsl_enabled=False, mpp_enabled=True)
        if self.is_fecmap:
            return hp
        return replace(hp, lsl_enabled=False, mpp_enabled=True)


def strategy_param_groups(strategy: Strategy, local_steps: int = 15):
    """(shared groups, private groups, per-step schedule of trainable groups).

    Baselines have no local part; their body lives in the ``global_part`` slot.
    """
    name = strategy.name
    if strategy.is_fecmap:
        groups = GROUPS
        private = ("local_part", "head")
    else:
        groups = ("global_part", "head")
        private = {"fedavg": (), "fedprox": (), "fedper": ("head",), "lgfed": ("global_part",),
                   "fedrep": ("head",)}[name]
    if strategy.private is not None:
        private = tuple(strategy.private)
    unknown = set(private) - set(groups)
    if unknown:
        raise ValueError(f"{name} has no groups {sorted(unknown)}")
    shared = tuple(g for g in groups if g not in private)
    if name == "fedrep":
        schedule = [("head",)] * local_steps + [("global_part",)] * strategy.body_steps
    else:
        schedule = [groups] * local_steps
    return shared, private, schedule


@dataclass
class FederationConfig:
    n_clients: int = 5
    participation_rate: float = 0.1
    rounds: int = 500
    hyper: HyperParams = field(default_factory=HyperParams)
    strategy: Strategy = field(default_factory=Strategy)
    aggregation_mode: str = "participants_mean"
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.participation_rate <= 1.0:
            raise ValueError("participation_rate must lie in (0, 1]")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"aggregation_mode must be one of {AGGREGATION_MODES}")


def n_participants(m: int, gamma: float) -> int:
    # half-up rounding so that e.g. 2.5 -> 3
    return max(1, min(m, int(math.floor(gamma * m + 0.5))))


def sample_participants(m: int, gamma: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned in ascending order."""
    if m < 1 or not 0.0 < gamma <= 1.0:
        raise ValueError("need m >= 1 and 0 < gamma <= 1")
    k = n_participants(m, gamma)
    return sorted(int(i) for i in rng.choice(m, size=k, replace=False))


def aggregate_global(uploads, mode: str = "participants_mean",
                     cache: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Average uploaded shared vectors.

    ``uploads`` is a sequence of (client_id, vector). Summation runs in
    ascending client id, so arrival order never matters. The stale mode writes
    uploads into ``cache`` and averages every cached client.
    """
    ups = sorted(((int(c), np.asarray(v, dtype=np.float64)) for c, v in uploads), key=lambda t: t[0])
    if not ups:
        raise RoundAborted("no uploads to aggregate")
    n = ups[0][1].shape
    if any(v.shape != n for _, v in ups):
        raise AggregationError("uploads differ in length")
    if mode == "participants_mean":
        vecs = [v for _, v in ups]
    elif mode == "all_clients_stale_mean":
        if cache is None:
            raise ValueError("stale mean needs the per-client cache")
        for c, v in ups:
            cache[c] = v.copy()
        if any(v.shape != n for v in cache.values()):
            raise AggregationError("cached vectors differ in length")
        vecs = [cache[c] for c in sorted(cache)]
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    # offsets from the first vector keep the mean exact when all uploads agree
    base = vecs[0]
    total = np.zeros(n)
    for v in vecs:
        total = total + (v - base)
    return base + total / len(vecs)


def pack_groups(net: ClientNetwork, groups) -> np.ndarray:
    parts = [flatten_params(net.part(g).params) for g in groups]
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack_groups(net: ClientNetwork, groups, vector: np.ndarray) -> None:
    vector = np.asarray(vector, dtype=np.float64)
    pos = 0
    for g in groups:
        sub = net.part(g)
        n = sub.spec.n_params
        sub.params = unflatten_params(vector[pos:pos + n], sub.spec)
        pos += n
    if pos != vector.size:
        raise AggregationError(f"shared vector has {vector.size} entries, groups need {pos}")


def make_network(strategy: Strategy, hp: HyperParams, dim_fstar: int, dim_fprime: int,
                 rng: np.random.Generator) -> ClientNetwork:
    hp = strategy.adjust(hp)
    return build_network(dim_fstar, dim_fprime, rng, with_local=strategy.is_fecmap,
                         mpp_enabled=hp.mpp_enabled, learning_rate=hp.learning_rate,
                         momentum=hp.momentum)


def initial_global(strategy: Strategy, hp: HyperParams, dim_fstar: int, dim_fprime: int,
                   seed: int) -> np.ndarray:
    """Starting shared vector, drawn from the server's own seed stream."""
    shared, _, _ = strategy_param_groups(strategy, hp.local_steps)
    template = make_network(strategy, hp, dim_fstar, dim_fprime, seeded_rng([seed, 0]))
    return pack_groups(template, shared)


@dataclass
class ClientReport:
    client_id: int
    round: int
    upload: np.ndarray
    n_samples: int
    train_loss: float
    metrics: Metrics


class Client:
    """One institution: its data, its network, its private random stream."""

    def __init__(self, client_id: int, train: EncodedSet, test: EncodedSet, strategy: Strategy,
                 hp: HyperParams, seed: int):
        self.client_id = client_id
        self.train = train
        self.test = test
        self.strategy = strategy
        self.hp = strategy.adjust(hp)
        self.shared, self.private, _ = strategy_param_groups(strategy, hp.local_steps)
        self.net = make_network(strategy, hp, train.f_star.shape[1], train.f_prime.shape[1],
                                seeded_rng([seed, 1, client_id]))
        self.rng = seeded_rng([seed, 2, client_id])
        self.last_round = -1

    def install(self, global_vec: np.ndarray) -> None:
        unpack_groups(self.net, self.shared, global_vec)

    def local_round(self, round_idx: int, global_vec: np.ndarray,
                    hyper: dict | None = None) -> ClientReport:
        """Overwrite shared groups, evaluate, train locally, report the new shared groups."""
        hp = self.hp
        if hyper:
            hp = replace(hp, learning_rate=hyper["lr"], momentum=hyper["momentum"],
                         local_steps=int(hyper["tau"]), lsl_weight=hyper["alpha"])
        self.install(global_vec)
        # test metrics describe the deployed model: fresh shared groups plus this
        # client's private groups, before local fine-tuning
        m = evaluate(self.net, self.test)
        _, _, schedule = strategy_param_groups(self.strategy, hp.local_steps)
        frozen = None
        if self.strategy.name == "fedprox" and self.strategy.mu_prox > 0:
            frozen = {g: flatten_params(self.net.part(g).params) for g in self.shared}
        self.net = client_local_update(self.net, tuple(self.train), hp, frozen,
                                       mu_prox=self.strategy.mu_prox, schedule=schedule,
                                       rng=self.rng)
        self.last_round = round_idx
        train_loss = evaluate(self.net, self.train).mean_loss
        return ClientReport(self.client_id, round_idx, pack_groups(self.net, self.shared),
                            len(self.train), train_loss, m)

    def hyper_dict(self) -> dict:
        return {"lr": self.hp.learning_rate, "momentum": self.hp.momentum,
                "tau": self.hp.local_steps, "alpha": self.hp.lsl_weight}


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    train_loss: float  # mean over this round's reporters
    accuracy: float
    mean_loss: float  # mean over every client's latest report
    mean_accuracy: float
    dropped: list[int] = field(default_factory=list)
    duration: float = 0.0
    aborted: bool = False


@dataclass
class ServerState:
    global_vec: np.ndarray
    n_clients: int
    rng: np.random.Generator
    round: int = 0
    cache: dict[int, np.ndarray] = field(default_factory=dict)
    latest: dict[int, ClientReport] = field(default_factory=dict)

    @classmethod
    def start(cls, config: FederationConfig, dim_fstar: int, dim_fprime: int) -> "ServerState":
        g = initial_global(config.strategy, config.hyper, dim_fstar, dim_fprime, config.seed)
        return cls(g, config.n_clients, seeded_rng([config.seed, 3]),
                   cache={i: g.copy() for i in range(config.n_clients)})

    def sample(self, config: FederationConfig) -> list[int]:
        return sample_participants(config.n_clients, config.participation_rate, self.rng)

    def finish_round(self, config: FederationConfig, participants: list[int],
                     reports: list[ClientReport], started: float) -> RoundRecord:
        """Aggregate delivered reports and advance the round counter.

        With no reports the shared model is kept and the record is flagged
        as aborted.
        """
        got = {r.client_id for r in reports}
        dropped = [c for c in participants if c not in got]
        for r in reports:
            self.latest[r.client_id] = r
        aborted = not reports
        if not aborted:
            self.global_vec = aggregate_global([(r.client_id, r.upload) for r in reports],
                                               config.aggregation_mode, self.cache)
        reps = sorted(reports, key=lambda r: r.client_id)
        nan = float("nan")
        rec = RoundRecord(
            round=self.round, participants=list(participants),
            train_loss=float(np.mean([r.train_loss for r in reps])) if reps else nan,
            accuracy=float(np.mean([r.metrics.accuracy for r in reps])) if reps else nan,
            mean_loss=_mean_latest(self.latest, "loss"),
            mean_accuracy=_mean_latest(self.latest, "acc"),
            dropped=dropped, duration=time.perf_counter() - started, aborted=aborted)
        self.round += 1
        return rec


def _mean_latest(latest: dict[int, ClientReport], what: str) -> float:
    if not latest:
        return float("nan")
    vals = [latest[c].train_loss if what == "loss" else latest[c].metrics.accuracy
            for c in sorted(latest)]
    return float(np.mean(vals))


@dataclass
class TrainingHistory:
    rounds: list[RoundRecord] = field(default_factory=list)
    globals: list[np.ndarray] = field(default_factory=list)  # shared vector after each round
    final_metrics: dict[int, Metrics] = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        if not self.final_metrics:
            return float("nan")
        return float(np.mean([self.final_metrics[c].accuracy for c in sorted(self.final_metrics)]))


def run_round(server: ServerState, clients: list[Client], config: FederationConfig):
    """One communication round in process. Returns (server, RoundRecord)."""
    started = time.perf_counter()
    participants = server.sample(config)
    reports = []
    for cid in participants:
        try:
            reports.append(clients[cid].local_round(server.round, server.global_vec))
        except Exception:  # a failing client only drops out of this round
            log.exception("client %d failed in round %d", cid, server.round)
    rec = server.finish_round(config, participants, reports, started)
    if rec.aborted:
        raise RoundAborted(f"round {rec.round}: every participant dropped")
    return server, rec


def build_clients(config: FederationConfig, datasets: list[tuple[EncodedSet, EncodedSet]]) -> list[Client]:
    if len(datasets) != config.n_clients:
        raise ValueError(f"{len(datasets)} datasets for {config.n_clients} clients")
    return [Client(i, tr, te, config.strategy, config.hyper, config.seed)
            for i, (tr, te) in enumerate(datasets)]


def run_training(config: FederationConfig, datasets: list[tuple[EncodedSet, EncodedSet]],
                 clients: list[Client] | None = None) -> TrainingHistory:
    """T rounds of simulation; ``datasets`` holds one (train, test) pair per client."""
    clients = clients if clients is not None else build_clients(config, datasets)
    tr0 = clients[0].train
    server = ServerState.start(config, tr0.f_star.shape[1], tr0.f_prime.shape[1])
    for c in clients:
        c.install(server.global_vec)
    hist = TrainingHistory()
    for _ in range(config.rounds):
        _, rec = run_round(server, clients, config)
        hist.rounds.append(rec)
        hist.globals.append(server.global_vec.copy())
    hist.final_metrics = {c: server.latest[c].metrics for c in sorted(server.latest)}
    return hist
