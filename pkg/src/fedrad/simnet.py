"""Deterministic simulated-network execution of federated experiments.

A virtual clock (integer nanoseconds, no real sleeping) drives the same
round structure as the live server: broadcast, local epoch, delta upload,
aggregate, checkpoint. Per-site links model latency, relative compute speed
(local-epoch duration multiplier), scheduled per-round outages, and
permanent crashes. The timing report accounts for stragglers: a round's
wall time is the slowest site's busy time (train + both message latencies),
and every faster site idles for the difference.

With zero faults the simulated run is bit-identical to the live transports
and to the sequential reference, because all weight arithmetic goes through
the same pure functions; the simulator only adds time.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import SiteDataset
from .fedproto import (Checkpoint, CheckpointMismatch, ServerParams, aggregate,
                       checkpoint_path, load_checkpoint, AGG_STRICT)
from .fingerprint import DerivedConfig, average_fingerprints, compute_fingerprint, derive_config
from .learner import build_training_matrix, site_train_seed, train_epochs
from .seeding import rng_from

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000

DEFAULT_PER_BATCH_SECONDS = 0.02


@dataclass(frozen=True)
class SiteLink:
    """Network/compute characteristics and fault schedule of one site."""

    site_id: str
    latency_ms: float = 0.0
    speed_factor: float = 1.0
    offline_rounds: frozenset[int] = frozenset()
    crash_at_round: int | None = None

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise ValueError(f"{self.site_id}: speed_factor must be positive")
        if self.latency_ms < 0:
            raise ValueError(f"{self.site_id}: latency_ms must be non-negative")
        if any(r < 1 for r in self.offline_rounds):
            raise ValueError(f"{self.site_id}: offline rounds start at 1")
        if self.crash_at_round is not None and self.crash_at_round < 1:
            raise ValueError(f"{self.site_id}: crash_at_round must be >= 1 "
                             "(cannot crash before joining)")
        object.__setattr__(self, "offline_rounds", frozenset(self.offline_rounds))

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "latency_ms": self.latency_ms,
            "speed_factor": self.speed_factor,
            "offline_rounds": sorted(self.offline_rounds),
            "crash_at_round": self.crash_at_round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiteLink":
        return cls(
            site_id=d["site_id"],
            latency_ms=float(d.get("latency_ms", 0.0)),
            speed_factor=float(d.get("speed_factor", 1.0)),
            offline_rounds=frozenset(int(r) for r in d.get("offline_rounds", [])),
            crash_at_round=(None if d.get("crash_at_round") is None
                            else int(d["crash_at_round"])),
        )


def apply_fault_schedule(links: Sequence[SiteLink], round_index: int) -> set[str]:
    """Sites unavailable in the given round: scheduled outages plus every
    site whose permanent crash round has passed."""
    if round_index < 1:
        raise ValueError("rounds start at 1")
    out = set()
    for link in links:
        if round_index in link.offline_rounds:
            out.add(link.site_id)
        if link.crash_at_round is not None and round_index >= link.crash_at_round:
            out.add(link.site_id)
    return out


@dataclass(frozen=True)
class RoundSiteTiming:
    round_index: int
    site_id: str
    train_ns: int
    latency_ns: int  # both message hops of the round
    idle_ns: int
    wall_ns: int

    @property
    def busy_ns(self) -> int:
        return self.train_ns + self.latency_ns


@dataclass
class TimingReport:
    n_sites: int
    rows: list[RoundSiteTiming] = field(default_factory=list)

    @property
    def total_wall_ns(self) -> int:
        per_round = {row.round_index: row.wall_ns for row in self.rows}
        return sum(per_round.values())

    def idle_by_site(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for row in self.rows:
            totals[row.site_id] = totals.get(row.site_id, 0) + row.idle_ns
        return totals

    def to_csv(self, experiment_digest: str | None = None) -> str:
        lines = []
        if experiment_digest is not None:
            lines.append(f"# experiment={experiment_digest}")
        lines.append("round,site,train_s,latency_s,idle_s,wall_s")
        for row in self.rows:
            lines.append(",".join([
                str(row.round_index), row.site_id,
                repr(row.train_ns / NS_PER_S), repr(row.latency_ns / NS_PER_S),
                repr(row.idle_ns / NS_PER_S), repr(row.wall_ns / NS_PER_S),
            ]))
        return "\n".join(lines) + "\n"


@dataclass
class SimResult:
    final_weights: np.ndarray | None
    timing: TimingReport
    derived: DerivedConfig
    aborted: bool = False
    stopped: bool = False
    abort_reason: str | None = None
    abort_round: int | None = None
    checkpoint_file: Path | None = None


def _epoch_ns(link: SiteLink, params: ServerParams, per_batch_seconds: float) -> int:
    base = params.train.batches_per_epoch * round(per_batch_seconds * NS_PER_S)
    return round(link.speed_factor * base)


def run_simulated(params: ServerParams, datasets: Mapping[str, SiteDataset],
                  links: Sequence[SiteLink], *,
                  per_batch_seconds: float = DEFAULT_PER_BATCH_SECONDS,
                  resume: Path | None = None,
                  stop_after_round: int | None = None) -> SimResult:
    """Run a whole federated experiment on the virtual clock.

    ``datasets`` maps site id to its loaded dataset; ``links`` must cover
    every expected site. Checkpoints are written to
    ``params.checkpoint_dir`` exactly as the live server does, and
    ``resume``/``stop_after_round`` behave identically.
    """
    expected = sorted(params.expected_sites)
    link_by_site = {l.site_id: l for l in links}
    missing_links = [s for s in expected if s not in link_by_site]
    if missing_links:
        raise ValueError(f"links missing for sites: {missing_links}")
    missing_data = [s for s in expected if s not in datasets]
    if missing_data:
        raise ValueError(f"datasets missing for sites: {missing_data}")
    for link in links:
        if link.crash_at_round is not None and link.crash_at_round > params.rounds:
            logger.warning("%s crashes at round %d, after the experiment ends",
                           link.site_id, link.crash_at_round)

    ckpt_dir = Path(params.checkpoint_dir) if params.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    # Configuration-sync phase (instantaneous on the virtual clock).
    fingerprints = {s: compute_fingerprint(datasets[s].train) for s in expected}
    fp_avg = average_fingerprints([fingerprints[s] for s in expected])
    derived = derive_config(fp_avg, params.experiment_seed, params.train)
    server_rng = rng_from(params.experiment_digest, "server")

    if resume is not None:
        ckpt = load_checkpoint(resume, expected_digest=params.experiment_digest)
        if ckpt.experiment_seed != params.experiment_seed:
            raise CheckpointMismatch("checkpoint was written with a different experiment seed")
        if ckpt.fp_avg_digest != fp_avg.digest:
            raise CheckpointMismatch(
                "checkpoint fingerprint digest does not match the site data")
        w = ckpt.weights.copy()
        start_round = ckpt.round_index
        if ckpt.rng_state:
            server_rng.bit_generator.state = ckpt.rng_state
    else:
        w = derived.init_weights.copy()
        start_round = 0

    matrices = {s: build_training_matrix(datasets[s].train, derived.feature_config)
                for s in expected}
    site_cfg = {s: replace(params.train, epochs=1,
                           seed=site_train_seed(params.train.seed, s))
                for s in expected}

    def write_checkpoint(t: int) -> Path | None:
        if ckpt_dir is None:
            return None
        ckpt = Checkpoint(
            round_index=t, weights=w, fp_avg_digest=fp_avg.digest,
            experiment_seed=params.experiment_seed,
            experiment_digest=params.experiment_digest,
            completed_sites={s: True for s in expected},
            rng_state=server_rng.bit_generator.state,
        )
        return ckpt.save(checkpoint_path(ckpt_dir, t))

    last_ckpt = write_checkpoint(start_round)
    timing = TimingReport(n_sites=len(expected))

    lat_ns = {s: round(link_by_site[s].latency_ms * 1_000_000) for s in expected}
    train_ns = {s: _epoch_ns(link_by_site[s], params, per_batch_seconds) for s in expected}
    timeout_ns = round(params.round_timeout_s * NS_PER_S)

    clock = 0
    for t in range(start_round + 1, params.rounds + 1):
        unavailable = apply_fault_schedule(links, t)
        responders = [s for s in expected if s not in unavailable]

        # Delta arrival events: RoundStart hop, one local epoch, upload hop.
        heap: list[tuple[int, str]] = []
        for s in responders:
            arrive_ns = 2 * lat_ns[s] + train_ns[s]
            heapq.heappush(heap, (arrive_ns, s))

        received: dict[str, np.ndarray] = {}
        while heap:
            arrive_ns, s = heapq.heappop(heap)
            if arrive_ns > timeout_ns:
                break  # past the deadline; the server stops waiting
            trained = train_epochs(w, matrices[s][0], matrices[s][1],
                                   site_cfg[s], start_epoch=t)
            received[s] = trained - w

        complete = set(received) == set(expected)
        wall_ns = (max(2 * lat_ns[s] + train_ns[s] for s in received)
                   if complete else timeout_ns)
        for s in expected:
            busy = (train_ns[s] + 2 * lat_ns[s]) if s in received else 0
            timing.rows.append(RoundSiteTiming(
                round_index=t, site_id=s,
                train_ns=train_ns[s] if s in received else 0,
                latency_ns=2 * lat_ns[s] if s in received else 0,
                idle_ns=wall_ns - busy, wall_ns=wall_ns))
        clock += wall_ns

        if not complete and (params.aggregation == AGG_STRICT or not received):
            reason = (f"round {t}: no delta from "
                      f"{sorted(set(expected) - set(received))}")
            logger.error("simulated experiment aborted: %s", reason)
            return SimResult(final_weights=None, timing=timing, derived=derived,
                             aborted=True, abort_reason=reason, abort_round=t,
                             checkpoint_file=last_ckpt)
        if not complete:
            logger.warning("round %d: excluding %s (tolerant mode)", t,
                           sorted(set(expected) - set(received)))

        w = aggregate(w, received, n_sites=len(received))
        last_ckpt = write_checkpoint(t)

        if stop_after_round == t:
            return SimResult(final_weights=None, timing=timing, derived=derived,
                             aborted=True, stopped=True,
                             abort_reason=f"stopped after round {t}",
                             abort_round=t, checkpoint_file=last_ckpt)

    # Final-model distribution round (one more exchange on the clock).
    clock += 2 * max(lat_ns.values(), default=0)
    return SimResult(final_weights=w, timing=timing, derived=derived,
                     checkpoint_file=last_ckpt)
