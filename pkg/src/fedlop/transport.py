"""Newline-delimited JSON protocol between a coordinator and client agents.

One JSON object per line. Keys appear in a fixed order per message type and
floats are written with Python's shortest round-trip repr, so weights survive
the wire bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .federation import Client, ClientReport, FederationConfig, ServerState, TrainingHistory
from .metrics import Metrics

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
N_CLASSES = 5


class ProtocolError(ValueError):
    pass


class VersionError(ProtocolError):
    pass


class EncodingError(ValueError):
    pass


@dataclass
class Hello:
    client_id: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass
class RoundStart:
    round: int
    strategy_name: str
    weights: np.ndarray  # "global" on the wire
    hyper: dict


@dataclass
class Update:
    client_id: int
    round: int
    weights: np.ndarray
    n_samples: int
    train_loss: float


@dataclass
class MetricsMsg:
    client_id: int
    round: int
    accuracy: float
    confusion: list


@dataclass
class Shutdown:
    reason: str


Message = Hello | RoundStart | Update | MetricsMsg | Shutdown

_HYPER_KEYS = ("lr", "momentum", "tau", "alpha")


def _weights_out(w) -> list[float]:
    arr = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EncodingError("refusing to serialise a non-finite weight")
    return arr.tolist()


def _real_out(x, name: str) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise EncodingError(f"{name} is not finite")
    return x


def encode_message(m: Message) -> bytes:
    if isinstance(m, Hello):
        d = {"type": "hello", "client_id": int(m.client_id), "protocol_version": int(m.protocol_version)}
    elif isinstance(m, RoundStart):
        d = {"type": "round_start", "round": int(m.round), "strategy_name": str(m.strategy_name),
             "global": _weights_out(m.weights),
             "hyper": {k: (int(m.hyper[k]) if k == "tau" else _real_out(m.hyper[k], k))
                       for k in _HYPER_KEYS}}
    elif isinstance(m, Update):
        d = {"type": "update", "client_id": int(m.client_id), "round": int(m.round),
             "global": _weights_out(m.weights), "n_samples": int(m.n_samples),
             "train_loss": _real_out(m.train_loss, "train_loss")}
    elif isinstance(m, MetricsMsg):
        d = {"type": "metrics", "client_id": int(m.client_id), "round": int(m.round),
             "accuracy": _real_out(m.accuracy, "accuracy"),
             "confusion": [[int(v) for v in row] for row in m.confusion]}
    elif isinstance(m, Shutdown):
        d = {"type": "shutdown", "reason": str(m.reason)}
    else:
        raise EncodingError(f"not a protocol message: {type(m).__name__}")
    try:
        text = json.dumps(d, separators=(",", ":"), allow_nan=False, ensure_ascii=True)
    except ValueError as exc:
        raise EncodingError(str(exc)) from exc
    return text.encode("utf-8") + b"\n"


def _get(d: dict, key: str, kind):
    if key not in d:
        raise ProtocolError(f"field {key!r} missing from {d.get('type')!r} message")
    v = d[key]
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ProtocolError(f"field {key!r} must be an integer")
    elif kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"field {key!r} must be a number")
        v = float(v)
    elif not isinstance(v, kind):
        raise ProtocolError(f"field {key!r} has the wrong type")
    return v


def _round(d: dict) -> int:
    r = _get(d, "round", int)
    if r < 0:
        raise ProtocolError("round must be non-negative")
    return r


def _weights_in(d: dict) -> np.ndarray:
    w = _get(d, "global", list)
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in w):
        raise ProtocolError("weight array must contain numbers only")
    return np.array(w, dtype=np.float64)


def decode_message(line: bytes | str) -> Message:
    try:
        d = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if not isinstance(d, dict) or "type" not in d:
        raise ProtocolError("frame is not a tagged object")
    tag = d["type"]
    if tag == "hello":
        version = _get(d, "protocol_version", int)
        if version != PROTOCOL_VERSION:
            raise VersionError(f"unsupported protocol_version {version}")
        return Hello(_get(d, "client_id", int), version)
    if tag == "round_start":
        hyper = _get(d, "hyper", dict)
        h = {}
        for k in _HYPER_KEYS:
            h[k] = _get(hyper, k, int if k == "tau" else float)
        return RoundStart(_round(d), _get(d, "strategy_name", str), _weights_in(d), h)
    if tag == "update":
        return Update(_get(d, "client_id", int), _round(d), _weights_in(d),
                      _get(d, "n_samples", int), _get(d, "train_loss", float))
    if tag == "metrics":
        conf = _get(d, "confusion", list)
        ok = (len(conf) == N_CLASSES and all(isinstance(r, list) and len(r) == N_CLASSES for r in conf)
              and all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for r in conf for v in r))
        if not ok:
            raise ProtocolError("confusion must be a 5x5 matrix of non-negative integers")
        return MetricsMsg(_get(d, "client_id", int), _round(d), _get(d, "accuracy", float), conf)
    if tag == "shutdown":
        return Shutdown(_get(d, "reason", str))
    raise ProtocolError(f"unknown message type {tag!r}")


def send(sock: socket.socket, m: Message) -> None:
    sock.sendall(encode_message(m))


# ---------------------------------------------------------------------------
# coordinator

@dataclass
class _Conn:
    sock: socket.socket
    client_id: int | None = None
    alive: bool = True
    lock: threading.Lock = field(default_factory=threading.Lock)

    def send(self, m: Message) -> bool:
        with self.lock:
            if not self.alive:
                return False
            try:
                send(self.sock, m)
                return True
            except OSError:
                self.alive = False
                return False

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Coordinator:
    """Server side of a distributed run.

    Binds on construction (port 0 picks a free port, see ``address``), waits
    for one hello per client, then drives the same round logic as the
    in-process simulator. Each connection has a reader thread; aggregation
    happens on the calling thread in ascending client id.
    """

    def __init__(self, config: FederationConfig, dim_fstar: int, dim_fprime: int,
                 host: str = "127.0.0.1", port: int = 0, round_timeout: float = 60.0,
                 hello_timeout: float = 300.0):
        self.config = config
        self.dims = (dim_fstar, dim_fprime)
        self.round_timeout = round_timeout
        self.hello_timeout = hello_timeout
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self._conns: dict[int, _Conn] = {}
        self._all: list[_Conn] = []
        self._lock = threading.Condition()
        self._inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self.bad_frames = 0
        self.rejected: list[str] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    # connection handling -------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                s, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            s.settimeout(None)
            conn = _Conn(s)
            with self._lock:
                self._all.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _reject(self, conn: _Conn, reason: str):
        log.warning("rejecting connection: %s", reason)
        self.rejected.append(reason)
        conn.send(Shutdown(f"error: {reason}"))
        conn.close()

    def _register(self, conn: _Conn, hello: Hello) -> bool:
        cid = hello.client_id
        with self._lock:
            if not 0 <= cid < self.config.n_clients:
                reason = f"client_id {cid} out of range"
            elif cid in self._conns and self._conns[cid].alive:
                reason = f"duplicate client_id {cid}"
            else:
                conn.client_id = cid
                self._conns[cid] = conn
                self._lock.notify_all()
                log.info("client %d joined", cid)
                return True
        self._reject(conn, reason)
        return False

    def _read_loop(self, conn: _Conn):
        reader = conn.sock.makefile("rb")
        try:
            for line in reader:
                if self._stop.is_set():
                    break
                try:
                    msg = decode_message(line)
                except VersionError as exc:
                    self._reject(conn, str(exc))
                    return
                except ProtocolError as exc:
                    self.bad_frames += 1
                    log.warning("skipping bad frame: %s", exc)
                    continue
                if conn.client_id is None:
                    if isinstance(msg, Hello):
                        if not self._register(conn, msg):
                            return
                    else:
                        self.bad_frames += 1
                        log.warning("frame before hello ignored")
                    continue
                if isinstance(msg, (Update, MetricsMsg)) and msg.client_id == conn.client_id:
                    self._inbox.put((conn.client_id, msg))
                else:
                    self.bad_frames += 1
                    log.warning("unexpected %s from client %s", type(msg).__name__, conn.client_id)
        except OSError:
            pass
        finally:
            conn.alive = False
            if conn.client_id is not None:
                self._inbox.put((conn.client_id, None))

    def _wait_for_clients(self):
        deadline = time.monotonic() + self.hello_timeout
        with self._lock:
            while len([c for c in self._conns.values() if c.alive]) < self.config.n_clients:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"only {len(self._conns)} of {self.config.n_clients} clients joined")
                self._lock.wait(min(left, 0.5))

    # rounds --------------------------------------------------------------

    def _collect(self, round_idx: int, pending: set[int]) -> list[ClientReport]:
        updates: dict[int, Update] = {}
        metrics: dict[int, MetricsMsg] = {}
        done: list[ClientReport] = []
        deadline = time.monotonic() + self.round_timeout
        while pending:
            left = deadline - time.monotonic()
            if left <= 0:
                log.warning("round %d timed out waiting for %s", round_idx, sorted(pending))
                break
            try:
                cid, msg = self._inbox.get(timeout=left)
            except queue.Empty:
                continue
            if cid not in pending:
                continue
            if msg is None:
                log.warning("client %d disconnected during round %d", cid, round_idx)
                pending.discard(cid)
                continue
            if msg.round != round_idx:
                log.warning("stale %s from client %d (round %d)", type(msg).__name__, cid, msg.round)
                continue
            if isinstance(msg, Update):
                updates[cid] = msg
            else:
                metrics[cid] = msg
            if cid in updates and cid in metrics:
                u, mm = updates[cid], metrics[cid]
                met = Metrics.from_confusion(mm.confusion)
                met.accuracy = mm.accuracy
                done.append(ClientReport(cid, round_idx, u.weights, u.n_samples, u.train_loss, met))
                pending.discard(cid)
        return done

    def serve(self) -> TrainingHistory:
        acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        acceptor.start()
        try:
            self._wait_for_clients()
            cfg = self.config
            server = ServerState.start(cfg, *self.dims)
            hyper = {"lr": cfg.hyper.learning_rate, "momentum": cfg.hyper.momentum,
                     "tau": cfg.hyper.local_steps, "alpha": cfg.hyper.lsl_weight}
            hist = TrainingHistory()
            n_expected = server.global_vec.size
            for _ in range(cfg.rounds):
                started = time.perf_counter()
                t = server.round
                participants = server.sample(cfg)
                pending = set()
                for cid in participants:
                    conn = self._conns.get(cid)
                    if conn is not None and conn.send(RoundStart(t, cfg.strategy.name, server.global_vec, hyper)):
                        pending.add(cid)
                reports = [r for r in self._collect(t, pending) if r.upload.size == n_expected]
                rec = server.finish_round(cfg, participants, reports, started)
                if rec.aborted:
                    log.error("round %d aborted: no uploads", t)
                hist.rounds.append(rec)
                hist.globals.append(server.global_vec.copy())
            hist.final_metrics = {c: server.latest[c].metrics for c in sorted(server.latest)}
            return hist
        finally:
            self.close()

    def close(self, reason: str = "done"):
        self._stop.set()
        with self._lock:
            conns = list(self._all)
        for c in conns:
            if c.alive:
                c.send(Shutdown(reason))
            c.close()
        self._listener.close()


# ---------------------------------------------------------------------------
# agent

def _connect(address, retries: int, delay: float) -> socket.socket | None:
    for attempt in range(retries):
        try:
            return socket.create_connection(address, timeout=10.0)
        except OSError as exc:
            log.warning("connect to %s failed (%s), attempt %d/%d", address, exc, attempt + 1, retries)
            if attempt + 1 < retries:
                time.sleep(delay)
    return None


def agent_run(client: Client, address, *, retries: int = 3, retry_delay: float = 1.0) -> int:
    """Serve one client until shutdown. Returns a process exit code.

    Only the shared groups ever leave this function; a lost connection is
    retried ``retries`` times before giving up with exit code 1.
    """
    address = tuple(address)
    while True:
        sock = _connect(address, retries, retry_delay)
        if sock is None:
            return 1
        sock.settimeout(None)
        try:
            send(sock, Hello(client.client_id))
            for line in sock.makefile("rb"):
                try:
                    msg = decode_message(line)
                except ProtocolError as exc:
                    log.warning("agent %d skipping bad frame: %s", client.client_id, exc)
                    continue
                if isinstance(msg, Shutdown):
                    log.info("agent %d shutting down: %s", client.client_id, msg.reason)
                    return 1 if msg.reason.startswith("error") else 0
                if not isinstance(msg, RoundStart):
                    log.warning("agent %d ignoring %s", client.client_id, type(msg).__name__)
                    continue
                if msg.round <= client.last_round:
                    log.warning("agent %d already answered round %d", client.client_id, msg.round)
                    continue
                rep = client.local_round(msg.round, msg.weights, msg.hyper)
                send(sock, Update(client.client_id, msg.round, rep.upload, rep.n_samples, rep.train_loss))
                send(sock, MetricsMsg(client.client_id, msg.round, rep.metrics.accuracy,
                                      rep.metrics.confusion.tolist()))
        except OSError as exc:
            log.warning("agent %d lost connection: %s", client.client_id, exc)
        finally:
            sock.close()
        log.warning("agent %d reconnecting", client.client_id)


# ---------------------------------------------------------------------------
# wire recording, used to audit what actually crosses the network

class RecordingProxy:
    """TCP relay that keeps a copy of every byte passing through it."""

    def __init__(self, target, host: str = "127.0.0.1"):
        self.target = tuple(target)
        self._listener = socket.create_server((host, 0))
        self._listener.settimeout(0.2)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self.upstream = bytearray()  # agent -> coordinator
        self.downstream = bytearray()  # coordinator -> agent
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._listener.getsockname()[:2]

    @property
    def captured(self) -> bytes:
        with self._lock:
            return bytes(self.upstream) + bytes(self.downstream)

    def _pipe(self, src, dst, buf):
        try:
            while True:
                chunk = src.recv(65536)
                if not chunk:
                    break
                with self._lock:
                    buf.extend(chunk)
                dst.sendall(chunk)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def _loop(self):
        while not self._stop.is_set():
            try:
                a, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            b = socket.create_connection(self.target)
            threading.Thread(target=self._pipe, args=(a, b, self.upstream), daemon=True).start()
            threading.Thread(target=self._pipe, args=(b, a, self.downstream), daemon=True).start()

    def close(self):
        self._stop.set()
        self._listener.close()
