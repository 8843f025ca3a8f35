"""Experiment configuration, data preparation, reports and sweeps."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (EncodedSet, FeatureSchema, SyntheticConfig, encode_dataset,
                   generate_client_records, load_csv, partition_clients, train_test_split,
                   write_csv)
from .federation import (AGGREGATION_MODES, STRATEGIES, Client, FederationConfig, Strategy,
                         TrainingHistory, build_clients, run_training)
from .model import ClientNetwork, HyperParams, client_forward
from .nn_core import mlp_forward, seeded_rng

log = logging.getLogger(__name__)

SWEEP_AXES = ("n_clients", "samples_per_client", "strategy")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    strategy: str = "fecmap"
    mu_prox: float = 0.01
    n_clients: int = 5
    participation_rate: float = 0.1
    rounds: int = 500
    aggregation_mode: str = "participants_mean"
    hyper: HyperParams = field(default_factory=HyperParams)
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    samples_per_client: int = 2000
    csv_path: str | None = None
    schema: FeatureSchema | None = None
    split_ratio: float = 0.7
    seed: int = 0
    split_seed: int = 0
    output_dir: str = "runs/default"
    mode: str = "simulate"
    host: str = "127.0.0.1"
    port: int = 5757
    round_timeout: float = 60.0
    export_representations: bool = False

    def federation(self) -> FederationConfig:
        return FederationConfig(self.n_clients, self.participation_rate, self.rounds, self.hyper,
                                Strategy(self.strategy, self.mu_prox), self.aggregation_mode,
                                self.seed)

    def dims(self) -> tuple[int, int]:
        schema = self.data_schema()
        return schema.dim_fstar, schema.dim_fprime

    def data_schema(self) -> FeatureSchema:
        return self.schema if self.csv_path else self.synthetic.schema()

    def to_dict(self) -> dict:
        data: dict = {"samples_per_client": self.samples_per_client, "split_ratio": self.split_ratio}
        if self.csv_path:
            data["csv"] = self.csv_path
            data["schema"] = self.schema.to_dict()
        else:
            data["synthetic"] = asdict(self.synthetic)
        return {
            "strategy": self.strategy, "mu_prox": self.mu_prox,
            "federation": {"n_clients": self.n_clients, "participation_rate": self.participation_rate,
                           "rounds": self.rounds, "aggregation_mode": self.aggregation_mode},
            "hyper": asdict(self.hyper),
            "data": data,
            "seeds": {"federation": self.seed, "split": self.split_seed},
            "output_dir": self.output_dir, "mode": self.mode,
            "transport": {"host": self.host, "port": self.port, "round_timeout": self.round_timeout},
            "export_representations": self.export_representations,
        }


def _section(d: dict, name: str, allowed) -> dict:
    sub = d.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{name}: expected an object")
    extra = set(sub) - set(allowed)
    if extra:
        raise ConfigError(f"{name}.{sorted(extra)[0]}: unknown field")
    return sub


def _typed(value, kind, name):
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}") from None


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    top = {"strategy", "mu_prox", "federation", "hyper", "data", "seeds", "output_dir", "mode",
           "transport", "export_representations"}
    extra = set(d) - top
    if extra:
        raise ConfigError(f"{sorted(extra)[0]}: unknown field")
    cfg = ExperimentConfig()
    if "strategy" in d:
        cfg.strategy = str(d["strategy"])
        if cfg.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: must be one of {STRATEGIES}")
    if "mu_prox" in d:
        cfg.mu_prox = _typed(d["mu_prox"], float, "mu_prox")

    fed = _section(d, "federation", ("n_clients", "participation_rate", "rounds", "aggregation_mode"))
    for k, kind in (("n_clients", int), ("participation_rate", float), ("rounds", int)):
        if k in fed:
            setattr(cfg, k, _typed(fed[k], kind, f"federation.{k}"))
    if "aggregation_mode" in fed:
        cfg.aggregation_mode = str(fed["aggregation_mode"])
        if cfg.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError(f"federation.aggregation_mode: must be one of {AGGREGATION_MODES}")

    hyper_fields = {f.name: f for f in fields(HyperParams)}
    hyp = _section(d, "hyper", hyper_fields)
    kinds = {"lsl_weight": float, "learning_rate": float, "momentum": float, "local_steps": int,
             "lsl_enabled": bool, "mpp_enabled": bool, "batch_size": int}
    hvals = {}
    for k, v in hyp.items():
        hvals[k] = None if (k == "batch_size" and v is None) else _typed(v, kinds[k], f"hyper.{k}")
    try:
        cfg.hyper = HyperParams(**hvals)
    except ValueError as exc:
        raise ConfigError(f"hyper: {exc}") from None

    data = _section(d, "data", ("synthetic", "samples_per_client", "split_ratio", "csv", "schema"))
    if "synthetic" in data and "csv" in data:
        raise ConfigError("data: give exactly one of synthetic or csv")
    if "samples_per_client" in data:
        cfg.samples_per_client = _typed(data["samples_per_client"], int, "data.samples_per_client")
    if "split_ratio" in data:
        cfg.split_ratio = _typed(data["split_ratio"], float, "data.split_ratio")
    if "csv" in data:
        path = Path(str(data["csv"]))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"data.csv: file not found: {path}")
        if "schema" not in data:
            raise ConfigError("data.schema: required with data.csv")
        try:
            cfg.schema = FeatureSchema.from_dict(data["schema"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"data.schema: {exc}") from None
        cfg.csv_path = str(path)
        cfg.synthetic = None
    else:
        syn_fields = {f.name: f.type for f in fields(SyntheticConfig)}
        syn = _section(data, "synthetic", syn_fields)
        svals = {}
        for k, v in syn.items():
            kind = int if k.startswith("n_") or k == "seed" else float
            svals[k] = _typed(v, kind, f"data.synthetic.{k}")
        try:
            cfg.synthetic = SyntheticConfig(**svals)
        except ValueError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None

    seeds = _section(d, "seeds", ("federation", "split"))
    if "federation" in seeds:
        cfg.seed = _typed(seeds["federation"], int, "seeds.federation")
    if "split" in seeds:
        cfg.split_seed = _typed(seeds["split"], int, "seeds.split")
    if "output_dir" in d:
        cfg.output_dir = str(d["output_dir"])
    if "mode" in d:
        cfg.mode = str(d["mode"])
        if cfg.mode not in ("simulate", "coordinator", "agent"):
            raise ConfigError("mode: must be simulate, coordinator or agent")
    tr = _section(d, "transport", ("host", "port", "round_timeout"))
    if "host" in tr:
        cfg.host = str(tr["host"])
    if "port" in tr:
        cfg.port = _typed(tr["port"], int, "transport.port")
    if "round_timeout" in tr:
        cfg.round_timeout = _typed(tr["round_timeout"], float, "transport.round_timeout")
    if "export_representations" in d:
        cfg.export_representations = _typed(d["export_representations"], bool, "export_representations")

    try:
        cfg.federation()
    except ValueError as exc:
        raise ConfigError(f"federation: {exc}") from None
    if cfg.samples_per_client < 1:
        raise ConfigError("data.samples_per_client: must be positive")
    if not 0.0 < cfg.split_ratio < 1.0:
        raise ConfigError("data.split_ratio: must lie in (0, 1)")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return config_from_dict(raw, base_dir=path.parent)


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("FEDLOP_OUT") or cfg.output_dir)


# ---------------------------------------------------------------------------
# data

def prepare_datasets(cfg: ExperimentConfig) -> list[tuple[EncodedSet, EncodedSet]]:
    """(train, test) per client, deterministic in the config's seeds."""
    if cfg.csv_path:
        schema = cfg.schema
        full = encode_dataset(load_csv(cfg.csv_path, schema), schema)
        if len(full) < cfg.n_clients:
            raise ConfigError(f"data.csv: {len(full)} records cannot serve {cfg.n_clients} clients")
        per_client = partition_clients(full, cfg.n_clients, seeded_rng([cfg.split_seed, 0]))
    else:
        schema = cfg.synthetic.schema()
        per_client = [encode_dataset(r, schema) for r in
                      generate_client_records(cfg.synthetic, cfg.n_clients, cfg.samples_per_client)]
    return [train_test_split(ds, cfg.split_ratio, seeded_rng([cfg.split_seed, 1, i]))
            for i, ds in enumerate(per_client)]


def make_client(cfg: ExperimentConfig, client_id: int,
                datasets: list[tuple[EncodedSet, EncodedSet]] | None = None) -> Client:
    datasets = datasets if datasets is not None else prepare_datasets(cfg)
    train, test = datasets[client_id]
    return Client(client_id, train, test, Strategy(cfg.strategy, cfg.mu_prox), cfg.hyper, cfg.seed)


# ---------------------------------------------------------------------------
# reports

def export_representations(net: ClientNetwork, dataset: EncodedSet, path) -> None:
    """Per-sample global, local, combined and pre-softmax representations as CSV."""
    f_star, f_prime, labels = dataset
    x = f_star if net.mpp_enabled else np.hstack([f_star, f_prime])
    _, rg = mlp_forward(net.global_part.params, net.global_part.spec, x)
    if net.local_part is not None:
        _, rl = mlp_forward(net.local_part.params, net.local_part.spec, x)
    else:
        rl = np.zeros((len(labels), 0))
    _, traces = client_forward(net, f_star, f_prime)
    logits = traces["head"].pre[-1]
    combined = np.hstack([rg, rl])
    header = (["label"] + [f"global_{i}" for i in range(rg.shape[1])]
              + [f"local_{i}" for i in range(rl.shape[1])]
              + [f"combined_{i}" for i in range(combined.shape[1])]
              + [f"discriminative_{i}" for i in range(logits.shape[1])])
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(labels)):
                w.writerow([int(labels[i])] + [repr(float(v)) for v in
                                               np.concatenate([rg[i], rl[i], combined[i], logits[i]])])
    except OSError as exc:
        raise OSError(f"cannot write representations to {path}: {exc}") from exc


def _num(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def write_reports(hist: TrainingHistory, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "participants", "mean_loss", "mean_accuracy",
                    "participant_loss", "participant_accuracy", "dropped"])
        for r in hist.rounds:
            w.writerow([r.round, ";".join(map(str, r.participants)), repr(r.mean_loss),
                        repr(r.mean_accuracy), repr(r.train_loss), repr(r.accuracy),
                        ";".join(map(str, r.dropped))])
    clients = {str(c): {k: _num(v) for k, v in m.to_dict().items()}
               for c, m in sorted(hist.final_metrics.items())}
    total = sum(np.asarray(m.confusion) for m in hist.final_metrics.values())
    report = {"strategy": cfg.strategy, "rounds": len(hist.rounds),
              "mean_accuracy": _num(hist.mean_accuracy),
              "pooled_confusion": np.asarray(total).astype(int).tolist() if hist.final_metrics else None,
              "clients": clients}
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    (out / "config_echo.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")


def simulate(cfg: ExperimentConfig) -> tuple[TrainingHistory, list[Client]]:
    fed = cfg.federation()
    clients = build_clients(fed, prepare_datasets(cfg))
    return run_training(fed, [], clients=clients), clients


def run(cfg: ExperimentConfig, out: Path | None = None) -> TrainingHistory:
    """Execute a simulate or coordinator config and write its reports."""
    out = out if out is not None else output_dir(cfg)
    if cfg.mode == "coordinator":
        from .transport import Coordinator
        coord = Coordinator(cfg.federation(), *cfg.dims(), host=cfg.host, port=cfg.port,
                            round_timeout=cfg.round_timeout)
        log.info("coordinator listening on %s:%d", *coord.address)
        hist = coord.serve()
        clients = None
    elif cfg.mode == "simulate":
        hist, clients = simulate(cfg)
    else:
        raise ConfigError("mode: agents are started with the agent command")
    write_reports(hist, cfg, out)
    if cfg.export_representations and clients is not None:
        for c in clients:
            export_representations(c.net, c.test, out / f"representations_client{c.client_id}.csv")
    return hist


def run_experiment(config_path, mode: str | None = None) -> int:
    """Load, run and report. Exit code 0 on success, 2 on bad config, 1 on failure."""
    try:
        cfg = load_config(config_path)
        if mode is not None:
            cfg.mode = mode
        run(cfg)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    except Exception:
        log.exception("run failed")
        return 1
    return 0


def run_sweep(base: ExperimentConfig, axis: str, values, strategies=None,
              out: Path | None = None) -> list[dict]:
    """One run per (strategy, value); writes sweep.csv and returns its rows."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis: must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("values: need at least one")
    out = out if out is not None else output_dir(base)
    strategies = [base.strategy] if axis == "strategy" or not strategies else list(strategies)
    rows = []
    for strat in strategies:
        for v in values:
            cfg = copy.deepcopy(base)
            cfg.mode = "simulate"
            label = str(v)
            try:
                if axis == "strategy":
                    if v not in STRATEGIES:
                        raise ConfigError(f"values: unknown strategy {v!r}")
                    cfg.strategy = str(v)
                elif axis == "n_clients":
                    cfg.n_clients = int(v)
                else:
                    cfg.samples_per_client = int(v)
                if axis != "strategy":
                    cfg.strategy = strat
                cfg.federation()
                cell = out / f"{axis}={label}" / cfg.strategy
                hist = run(cfg, cell)
                rows.append({"axis": axis, "value": label, "strategy": cfg.strategy,
                             "mean_accuracy": hist.mean_accuracy, "status": "ok"})
            except Exception as exc:  # a failed cell must not stop the sweep
                log.exception("sweep cell %s=%s/%s failed", axis, label, strat)
                rows.append({"axis": axis, "value": label, "strategy": cfg.strategy,
                             "mean_accuracy": float("nan"), "status": f"failed: {exc}"})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["axis", "value", "strategy", "mean_accuracy", "status"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean_accuracy": repr(r["mean_accuracy"])})
    return rows


def gen_data(cfg: ExperimentConfig, out: Path | None = None) -> list[Path]:
    """Write each client's synthetic records as a CSV file."""
    if cfg.synthetic is None:
        raise ConfigError("data.synthetic: gen-data needs a synthetic data source")
    out = out if out is not None else output_dir(cfg)
    schema = cfg.synthetic.schema()
    paths = []
    for i, recs in enumerate(generate_client_records(cfg.synthetic, cfg.n_clients, cfg.samples_per_client)):
        p = out / f"client_{i}.csv"
        write_csv(p, recs, schema)
        paths.append(p)
    (out / "schema.json").write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths


def train_centralized(train: EncodedSet, test: EncodedSet, hyper: HyperParams | None = None,
                      steps: int = 8000, seed: int = 0, checkpoint: int = 1000, last: int = 3) -> float:
    """Test accuracy of one pooled MLP, the generator's reference point.

    The network is the baseline layout (body over F*, head over the body
    output and F'). Minibatch SGD at a fixed step size jitters by several
    points between snapshots, so the result is the mean test accuracy of the
    final ``last`` checkpoints taken every ``checkpoint`` steps.
    """
    from .metrics import evaluate
    from .model import build_network, client_local_update
    hyper = hyper or HyperParams()
    rng = seeded_rng([seed, 7])
    net = build_network(train.f_star.shape[1], train.f_prime.shape[1], rng, with_local=False,
                        mpp_enabled=True, learning_rate=hyper.learning_rate, momentum=hyper.momentum)
    hp = HyperParams(learning_rate=hyper.learning_rate, momentum=hyper.momentum,
                     local_steps=checkpoint, lsl_enabled=False, batch_size=hyper.batch_size)
    accs = []
    for _ in range(max(1, steps // checkpoint)):
        net = client_local_update(net, tuple(train), hp, rng=rng)
        accs.append(evaluate(net, test).accuracy)
    tail = accs[-last:]
    return float(sum(tail) / len(tail))
