"""Federated round protocol: aggregation, checkpoints, server and client.

One communication round t: the server broadcasts the global weights, every
site trains exactly one local epoch and uploads its delta, and the server
applies the non-weighted update

    w(t+1) = w(t) + sum_i delta_i(t) / n_sites

with deltas summed in ascending site-id order so the result is bit-identical
regardless of arrival order. A checkpoint is written after every
aggregation; strict mode aborts (resumably) when any expected site misses
the round deadline, tolerant mode aggregates over the responders with
n = responder count. A closing exchange pushes the finished model to every
site, which persists it locally so evaluation never needs the server.
"""

from __future__ import annotations

import json
import logging
import queue
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import transport as tp
from . import wire
from .dataset import SiteDataset
from .fingerprint import DatasetFingerprint, average_fingerprints, compute_fingerprint, derive_config
from .learner import (TrainConfig, WEIGHT_LEN, build_training_matrix, save_weights,
                      site_train_seed, train_epochs)
from .seeding import rng_from

logger = logging.getLogger(__name__)

AGG_STRICT = "strict"
AGG_TOLERANT = "tolerant"

CHECKPOINT_MAGIC = b"FRCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sH32sI")


class CheckpointMismatch(ValueError):
    """Checkpoint does not belong to this experiment."""


class ExperimentAborted(RuntimeError):
    """A run ended before the final model; carries resume information."""

    def __init__(self, reason: str, round_index: int | None = None,
                 checkpoint_path: Path | None = None, stopped: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.round_index = round_index
        self.checkpoint_path = checkpoint_path
        self.stopped = stopped


def aggregate(w: np.ndarray, deltas: Mapping[str, np.ndarray], n_sites: int,
              strict: bool = True) -> np.ndarray:
    """Apply one non-weighted averaging update to the global weights.

    ``deltas`` maps site id to that site's weight delta; they are summed in
    ascending site-id order and the sum divided by ``n_sites``. In strict
    mode the number of deltas must equal ``n_sites``.
    """
    w = np.asarray(w, dtype=np.float64)
    if n_sites <= 0:
        raise ValueError("n_sites must be positive")
    if strict and len(deltas) != n_sites:
        raise ValueError(f"strict aggregation needs {n_sites} deltas, got {len(deltas)}")
    if not deltas:
        raise ValueError("no deltas to aggregate")
    acc = np.zeros_like(w)
    for site in sorted(deltas):
        delta = np.asarray(deltas[site], dtype=np.float64)
        if delta.shape != w.shape:
            raise ValueError(f"delta of {site} has shape {delta.shape}, expected {w.shape}")
        acc = acc + delta
    return w + acc / n_sites


@dataclass
class Checkpoint:
    """Resumable server state committed after every aggregation.

    ``rng_state`` is the server generator's bit-generator state; the server
    draws nothing from it today, but it is saved and restored so any future
    server-side randomization stays deterministic across restarts.
    """

    round_index: int
    weights: np.ndarray
    fp_avg_digest: str
    experiment_seed: int
    experiment_digest: str
    completed_sites: dict[str, bool]
    rng_state: dict

    def save(self, path: Path) -> Path:
        meta = {
            "round_index": self.round_index,
            "fp_avg_digest": self.fp_avg_digest,
            "experiment_seed": self.experiment_seed,
            "completed_sites": self.completed_sites,
            "rng_state": self.rng_state,
        }
        body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("ascii")
        digest_raw = bytes.fromhex(self.experiment_digest)
        with open(path, "wb") as f:
            f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                      digest_raw, len(body)))
            f.write(body)
            f.write(np.asarray(self.weights, dtype="<f8").tobytes())
        return Path(path)


def load_checkpoint(path: Path, expected_digest: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointMismatch(f"{path}: truncated header")
    magic, version, digest_raw, body_len = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")
    digest = digest_raw.hex()
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointMismatch(
            f"{path}: checkpoint belongs to experiment {digest[:12]}..., "
            f"expected {expected_digest[:12]}...")
    body_end = _CKPT_HEADER.size + body_len
    if len(raw) < body_end:
        raise CheckpointMismatch(f"{path}: truncated metadata")
    meta = json.loads(raw[_CKPT_HEADER.size:body_end].decode("ascii"))
    weights = np.frombuffer(raw[body_end:], dtype="<f8").copy()
    if weights.shape != (WEIGHT_LEN,):
        raise CheckpointMismatch(f"{path}: expected {WEIGHT_LEN} weights, got {weights.shape}")
    return Checkpoint(
        round_index=int(meta["round_index"]),
        weights=weights,
        fp_avg_digest=meta["fp_avg_digest"],
        experiment_seed=int(meta["experiment_seed"]),
        experiment_digest=digest,
        completed_sites={k: bool(v) for k, v in meta["completed_sites"].items()},
        rng_state=meta["rng_state"],
    )


@dataclass
class ServerParams:
    """Everything the server side of an experiment needs."""

    expected_sites: tuple[str, ...]
    rounds: int
    train: TrainConfig
    experiment_seed: int
    experiment_digest: str
    aggregation: str = AGG_STRICT
    round_timeout_s: float = 60.0
    setup_timeout_s: float = 120.0
    checkpoint_dir: Path | None = None

    def __post_init__(self):
        if not self.expected_sites:
            raise ValueError("at least one expected site is required")
        if self.aggregation not in (AGG_STRICT, AGG_TOLERANT):
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")
        if len(self.experiment_digest) != 64 or bytes.fromhex(self.experiment_digest) is None:
            raise ValueError("experiment_digest must be 64 hex characters")
        self.expected_sites = tuple(sorted(self.expected_sites))


def checkpoint_path(checkpoint_dir: Path, round_index: int) -> Path:
    return Path(checkpoint_dir) / f"checkpoint-{round_index:04d}.frck"


class _Inbox:
    """Tagged message stream from all connections to the coordinator."""

    def __init__(self):
        self.queue: queue.Queue = queue.Queue()

    def attach(self, conn: tp.Connection) -> None:
        threading.Thread(target=self._pump, args=(conn,), daemon=True).start()

    def _pump(self, conn: tp.Connection) -> None:
        while True:
            try:
                msg = conn.recv(timeout=None)
            except (tp.TransportClosed, tp.RecvTimeout, wire.ProtocolError) as exc:
                self.queue.put((conn, None, exc))
                return
            self.queue.put((conn, msg, None))

    def get(self, timeout: float | None):
        return self.queue.get(timeout=timeout)


class _Acceptor:
    def __init__(self, listener, inbox: _Inbox):
        self._listener = listener
        self._inbox = inbox
        self._stop = threading.Event()
        self._conns: list[tp.Connection] = []
        self._lock = threading.Lock()
        threading.Thread(target=self._run, daemon=True).start()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                conn = self._listener.accept(timeout=0.2)
            except tp.RecvTimeout:
                continue
            except tp.TransportClosed:
                return
            with self._lock:
                self._conns.append(conn)
            self._inbox.attach(conn)

    def close_all(self) -> None:
        self._stop.set()
        with self._lock:
            for conn in self._conns:
                conn.close()


def run_server(params: ServerParams, listener, *, resume: Path | None = None,
               stop_after_round: int | None = None) -> np.ndarray:
    """Drive a federated experiment to its final model over a transport.

    ``listener`` is anything with ``accept(timeout)`` (TcpServerTransport or
    InProcessHub). ``resume`` continues from a checkpoint written by an
    earlier, interrupted run of the same experiment. ``stop_after_round``
    emulates a server crash right after that round's checkpoint commits,
    for fault-injection tests.
    """
    expected = set(params.expected_sites)
    ckpt_dir = Path(params.checkpoint_dir) if params.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    resumed: Checkpoint | None = None
    if resume is not None:
        resumed = load_checkpoint(resume, expected_digest=params.experiment_digest)
        if resumed.experiment_seed != params.experiment_seed:
            raise CheckpointMismatch("checkpoint was written with a different experiment seed")

    inbox = _Inbox()
    acceptor = _Acceptor(listener, inbox)
    site_conn: dict[str, tp.Connection] = {}
    conn_site: dict[int, str] = {}
    dead_conns: set[int] = set()
    server_rng = rng_from(params.experiment_digest, "server")

    def bind(conn: tp.Connection, site_id: str) -> None:
        site_conn[site_id] = conn
        conn_site[id(conn)] = site_id

    def reject(conn: tp.Connection, reason: str) -> None:
        try:
            conn.send(wire.Abort(reason))
        except tp.TransportClosed:
            pass
        conn.close()

    def broadcast(msg: wire.Message) -> None:
        for site in sorted(site_conn):
            try:
                site_conn[site].send(msg)
            except tp.TransportClosed:
                logger.warning("broadcast to %s failed (disconnected)", site)

    def abort_run(reason: str, round_index: int, ckpt_file: Path | None) -> ExperimentAborted:
        broadcast(wire.Abort(reason))
        acceptor.close_all()
        logger.error("experiment aborted at round %d: %s", round_index, reason)
        return ExperimentAborted(reason, round_index=round_index, checkpoint_path=ckpt_file)

    try:
        # Phase 1: registration and fingerprint collection from every site.
        fingerprints: dict[str, DatasetFingerprint] = {}
        deadline = time.monotonic() + params.setup_timeout_s
        while set(fingerprints) != expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise abort_run("setup timeout: missing fingerprints from "
                                f"{sorted(expected - set(fingerprints))}", 0, None)
            try:
                conn, msg, _exc = inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if msg is None:
                continue
            if isinstance(msg, wire.Register):
                if msg.site_id not in expected:
                    reject(conn, f"unexpected site {msg.site_id!r}")
                    continue
                bind(conn, msg.site_id)
            elif isinstance(msg, wire.FingerprintSubmit):
                site = conn_site.get(id(conn))
                if site is not None:
                    fingerprints[site] = msg.fingerprint
            elif isinstance(msg, wire.Heartbeat):
                pass
            elif isinstance(msg, wire.Abort):
                raise abort_run(f"client abort during setup: {msg.reason}", 0, None)

        fp_avg = average_fingerprints([fingerprints[s] for s in sorted(fingerprints)])
        derived = derive_config(fp_avg, params.experiment_seed, params.train)

        if resumed is not None:
            if resumed.fp_avg_digest != fp_avg.digest:
                raise CheckpointMismatch(
                    "checkpoint fingerprint digest does not match the collected data")
            w = resumed.weights.copy()
            start_round = resumed.round_index
            if resumed.rng_state:
                server_rng.bit_generator.state = resumed.rng_state
            logger.info("resumed at round %d", start_round)
        else:
            w = derived.init_weights.copy()
            start_round = 0

        def write_checkpoint(t: int) -> Path | None:
            if ckpt_dir is None:
                return None
            ckpt = Checkpoint(
                round_index=t, weights=w, fp_avg_digest=fp_avg.digest,
                experiment_seed=params.experiment_seed,
                experiment_digest=params.experiment_digest,
                completed_sites={s: True for s in sorted(expected)},
                rng_state=server_rng.bit_generator.state,
            )
            return ckpt.save(checkpoint_path(ckpt_dir, t))

        last_ckpt = write_checkpoint(start_round)

        broadcast(wire.ConfigBroadcast(
            fp_avg=fp_avg, experiment_seed=params.experiment_seed,
            rounds=params.rounds, train=params.train,
            experiment_digest=params.experiment_digest))

        # Phase 2: the round loop.
        for t in range(start_round + 1, params.rounds + 1):
            broadcast(wire.RoundStart(round_index=t, weights=w))
            received: dict[str, np.ndarray] = {}
            deadline = time.monotonic() + params.round_timeout_s
            while set(received) != expected:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(expected - set(received))
                    if params.aggregation == AGG_STRICT or not received:
                        raise abort_run(f"round {t} timeout: no delta from {missing}",
                                        t, last_ckpt)
                    logger.warning("round %d: excluding %s (tolerant mode)", t, missing)
                    break
                try:
                    conn, msg, _exc = inbox.get(timeout=remaining)
                except queue.Empty:
                    continue
                if msg is None:
                    dead_conns.add(id(conn))
                    site = conn_site.get(id(conn))
                    if site is not None:
                        logger.warning("round %d: lost connection to %s", t, site)
                    continue
                if isinstance(msg, wire.Register):
                    # A restarted client re-registers mid-experiment: rebind it
                    # and replay the current configuration and round.
                    if msg.site_id not in expected:
                        reject(conn, f"unexpected site {msg.site_id!r}")
                        continue
                    bind(conn, msg.site_id)
                    try:
                        conn.send(wire.ConfigBroadcast(
                            fp_avg=fp_avg, experiment_seed=params.experiment_seed,
                            rounds=params.rounds, train=params.train,
                            experiment_digest=params.experiment_digest))
                        conn.send(wire.RoundStart(round_index=t, weights=w))
                    except tp.TransportClosed:
                        logger.warning("round %d: replay to %s failed", t, msg.site_id)
                elif isinstance(msg, wire.FingerprintSubmit):
                    pass  # re-registration replays its fingerprint; already averaged
                elif isinstance(msg, wire.DeltaUpload):
                    if msg.site_id not in expected:
                        continue
                    if msg.round_index != t:
                        logger.debug("ignoring stale delta for round %d from %s",
                                     msg.round_index, msg.site_id)
                        continue
                    if msg.delta.shape != (WEIGHT_LEN,):
                        raise abort_run(f"{msg.site_id} sent a malformed delta", t, last_ckpt)
                    received[msg.site_id] = msg.delta
                elif isinstance(msg, wire.Heartbeat):
                    pass
                elif isinstance(msg, wire.Abort):
                    site = conn_site.get(id(conn), "?")
                    if params.aggregation == AGG_STRICT:
                        raise abort_run(f"site {site} aborted: {msg.reason}", t, last_ckpt)
                    logger.warning("site %s aborted (%s); tolerant mode continues",
                                   site, msg.reason)

            # Tolerant mode reaches this point with a partial set; n then is
            # the responder count. Strict mode reaches it only complete.
            w = aggregate(w, received, n_sites=len(received))
            last_ckpt = write_checkpoint(t)
            broadcast(wire.CheckpointNotice(round_index=t))
            logger.info("round %d/%d aggregated over %d sites", t, params.rounds,
                        len(received))

            if stop_after_round == t:
                acceptor.close_all()
                raise ExperimentAborted(f"server stopped after round {t}",
                                        round_index=t, checkpoint_path=last_ckpt,
                                        stopped=True)

        # Phase 3: final-model distribution round. Wait briefly for clients
        # to hang up so the broadcast is never cut off by our own close.
        broadcast(wire.FinalModel(weights=w))
        open_conns = {id(c) for c in site_conn.values()} - dead_conns
        deadline = time.monotonic() + 5.0
        while open_conns and time.monotonic() < deadline:
            try:
                conn, msg, _exc = inbox.get(timeout=deadline - time.monotonic())
            except (queue.Empty, ValueError):
                break
            if msg is None:
                open_conns.discard(id(conn))
        return w
    finally:
        acceptor.close_all()


def run_client(dataset: SiteDataset, conn: tp.Connection, *,
               expected_digest: str | None = None,
               model_out: Path | None = None,
               recv_timeout_s: float = 600.0) -> np.ndarray:
    """Join an experiment as one site; returns the final global weights.

    The client registers, submits its training-data fingerprint, then for
    every round trains exactly one local epoch on the received weights and
    uploads the delta. The received final model is persisted to
    ``model_out`` so evaluation needs no server afterwards.
    """
    site_id = dataset.site_id
    if not dataset.train:
        raise ValueError(f"site {site_id} has no training samples")
    conn.send(wire.Register(site_id=site_id))
    conn.send(wire.FingerprintSubmit(fingerprint=compute_fingerprint(dataset.train)))

    features = labels = None
    local_cfg: TrainConfig | None = None

    while True:
        try:
            msg = conn.recv(timeout=recv_timeout_s)
        except (tp.TransportClosed, tp.RecvTimeout) as exc:
            raise ExperimentAborted(f"server connection lost: {exc}") from exc

        if isinstance(msg, wire.ConfigBroadcast):
            if expected_digest is not None and msg.experiment_digest != expected_digest:
                reason = (f"config digest mismatch: server has "
                          f"{msg.experiment_digest[:12]}..., site expects "
                          f"{expected_digest[:12]}...")
                try:
                    conn.send(wire.Abort(reason))
                except tp.TransportClosed:
                    pass
                conn.close()
                raise ExperimentAborted(reason)
            derived = derive_config(msg.fp_avg, msg.experiment_seed, msg.train)
            features, labels = build_training_matrix(dataset.train, derived.feature_config)
            local_cfg = replace(msg.train, epochs=1,
                                seed=site_train_seed(msg.train.seed, site_id))
        elif isinstance(msg, wire.RoundStart):
            if features is None or local_cfg is None:
                reason = "round started before configuration was received"
                try:
                    conn.send(wire.Abort(reason))
                finally:
                    conn.close()
                raise ExperimentAborted(reason)
            trained = train_epochs(msg.weights, features, labels, local_cfg,
                                   start_epoch=msg.round_index)
            try:
                conn.send(wire.DeltaUpload(round_index=msg.round_index, site_id=site_id,
                                           delta=trained - msg.weights))
            except tp.TransportClosed as exc:
                raise ExperimentAborted(f"server connection lost: {exc}") from exc
        elif isinstance(msg, wire.CheckpointNotice):
            logger.debug("%s: round %d committed", site_id, msg.round_index)
        elif isinstance(msg, wire.FinalModel):
            if model_out is not None:
                save_weights(model_out, msg.weights)
            conn.close()
            return msg.weights
        elif isinstance(msg, wire.Abort):
            conn.close()
            raise ExperimentAborted(f"server aborted: {msg.reason}")
        elif isinstance(msg, wire.Heartbeat):
            pass
        else:
            logger.debug("%s: ignoring unexpected %s", site_id, type(msg).__name__)
