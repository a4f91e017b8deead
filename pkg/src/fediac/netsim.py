"""Discrete-event timing of one aggregation round.

Clients finish local training after a fixed delay, then emit packets as a
Poisson process at their upload rate. The switch is a single FIFO server
with truncated-Gaussian service times (an M/G/1 queue); completed
aggregates leave through one shared egress with exponential pacing at the
download rate and reach every client at once.
"""

import enum
import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_random_state

# service-time variance is given in microseconds squared
_US2 = 1e-12


@dataclass(frozen=True)
class ServiceModel:
    """Gaussian service time, resampled whenever a draw is not positive."""

    mean: float
    var: float

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("mean service time must be positive")
        if self.var < 0:
            raise ValueError("service-time variance must be non-negative")

    @property
    def second_moment(self):
        return self.var + self.mean**2

    def sample(self, rng, size=None):
        if self.var == 0:
            return self.mean if size is None else np.full(size, self.mean)
        sd = math.sqrt(self.var)
        n = 1 if size is None else size
        out = rng.normal(self.mean, sd, n)
        bad = out <= 0
        while np.any(bad):
            out[bad] = rng.normal(self.mean, sd, int(bad.sum()))
            bad = out <= 0
        return float(out[0]) if size is None else out


SERVICE_MODELS = {
    "high": ServiceModel(3.03e-7, 2.15e-8 * _US2),
    "low": ServiceModel(3.03e-6, 2.15e-8 * _US2),
}


def service_time(kind, rng):
    """One service-time draw for a ``"high"`` or ``"low"`` performance switch."""
    try:
        model = SERVICE_MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown switch kind {kind!r}; use 'high' or 'low'") from None
    return model.sample(check_random_state(rng))


def mg1_mean_wait(arrival_rate, service):
    """Pollaczek-Khinchine mean queueing delay of an M/G/1 queue."""
    util = arrival_rate * service.mean
    if util >= 1:
        raise ValueError(f"unstable queue: utilization {util:.3f} >= 1")
    return arrival_rate * service.second_moment / (2.0 * (1.0 - util))


@dataclass(frozen=True)
class RatePlan:
    upload_rates: np.ndarray
    download_rate: float
    service: ServiceModel
    train_delays: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.upload_rates) <= 0):
            raise ValueError("upload rates must be positive")
        if self.download_rate <= 0:
            raise ValueError("download rate must be positive")
        if len(self.train_delays) != len(self.upload_rates):
            raise ValueError("need one training delay per client")

    @property
    def n_clients(self):
        return len(self.upload_rates)

    @classmethod
    def build(cls, upload_rates, service="high", train_delay=2.0, download_multiplier=5.0):
        rates = np.asarray(upload_rates, dtype=np.float64)
        if isinstance(service, str):
            service = SERVICE_MODELS[service]
        delays = np.broadcast_to(np.asarray(train_delay, dtype=np.float64), rates.shape).copy()
        return cls(rates, download_multiplier * float(rates.mean()), service, delays)


def load_trace(path, n_clients):
    """Read a per-second packet-count trace and assign rates to clients round-robin.

    Blank lines are ignored; any other non-integer line raises ``ValueError``
    naming its line number.
    """
    counts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                value = int(text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer: {text!r}") from None
            if value < 0:
                raise ValueError(f"{path}:{lineno}: negative packet count {value}")
            counts.append(value)
    if not counts:
        raise ValueError(f"{path}: empty trace")
    return np.array([counts[i % len(counts)] for i in range(n_clients)], dtype=np.float64)


def synthetic_rates(n_clients, rng, low=200.0, high=2800.0):
    """Uniform upload rates in packets per second."""
    return check_random_state(rng).uniform(low, high, n_clients)


class EventKind(enum.IntEnum):
    TRAIN_DONE = 0
    PKT_ARRIVE = 1
    SVC_DONE = 2
    BCAST_ARRIVE = 3


class Event(NamedTuple):
    """Heap entry; ``order`` is unique, so ties never reach ``payload``."""

    time: float
    kind: EventKind
    subject: int
    order: int
    payload: object = None


@dataclass
class PhaseResult:
    end_times: np.ndarray
    broadcasts: list
    waits: np.ndarray
    emitted: int
    served: int

    @property
    def end(self):
        return float(self.end_times.max()) if self.end_times.size else 0.0


@dataclass
class RoundTiming:
    """Wall-clock breakdown of a round; ``duration`` is when the last client is done."""

    duration: float
    train_end: float
    phase_ends: list
    mean_wait: float
    emitted: int
    served: int
    broadcast: int


class NetworkSimulator:
    """Event loop for the upload-aggregate-broadcast path of a round.

    Phases are run back to back with :meth:`transfer`; a client enters a
    phase at its ready time and leaves once it has received every broadcast
    of that phase.
    """

    def __init__(self, plan, rng):
        self.plan = plan
        self.rng = check_random_state(rng)
        self._order = 0

    def _push(self, heap, time, kind, subject, payload=None):
        self._order += 1
        heapq.heappush(heap, Event(time, kind, subject, self._order, payload))

    def train(self, start=0.0):
        """Per-client times at which local training finishes."""
        heap = []
        for cid, delay in enumerate(self.plan.train_delays):
            self._push(heap, start + float(delay), EventKind.TRAIN_DONE, cid)
        ready = np.empty(self.plan.n_clients)
        while heap:
            ev = heapq.heappop(heap)
            ready[ev.subject] = ev.time
        return ready

    def transfer(self, ready, packets_by_client, switch, expected_broadcasts=None,
                 keep_waits=True):
        """Simulate one upload phase.

        Parameters
        ----------
        ready : array of float
            Time each client may start sending.
        packets_by_client : sequence of lists of Packet
        switch : object with ``ingest(packet) -> list[Packet]``, or None
            ``None`` serves packets without aggregating them.
        expected_broadcasts : int, optional
            Broadcasts that end the phase; defaults to the number of distinct
            seqs sent.
        """
        plan, rng = self.plan, self.rng
        n = plan.n_clients
        heap = []
        if expected_broadcasts is None:
            expected_broadcasts = len({p.seq for pkts in packets_by_client for p in pkts})
        if switch is None:
            expected_broadcasts = 0
        cursors = [0] * n
        for cid, pkts in enumerate(packets_by_client):
            if pkts:
                gap = rng.exponential(1.0 / plan.upload_rates[cid])
                self._push(heap, ready[cid] + gap, EventKind.PKT_ARRIVE, cid, pkts[0])

        queue = []
        qhead = 0
        busy = False
        egress_free = -math.inf
        waits = []
        served = emitted = received = 0
        broadcasts = []
        last_bcast = None

        while heap:
            ev = heapq.heappop(heap)
            now = ev.time
            if ev.kind is EventKind.PKT_ARRIVE:
                emitted += 1
                cid = ev.subject
                cursors[cid] += 1
                pkts = packets_by_client[cid]
                if cursors[cid] < len(pkts):
                    gap = rng.exponential(1.0 / plan.upload_rates[cid])
                    self._push(heap, now + gap, EventKind.PKT_ARRIVE, cid, pkts[cursors[cid]])
                if busy:
                    queue.append((now, ev.payload))
                else:
                    busy = True
                    if keep_waits:
                        waits.append(0.0)
                    self._push(heap, now + plan.service.sample(rng), EventKind.SVC_DONE, 0,
                               ev.payload)
            elif ev.kind is EventKind.SVC_DONE:
                served += 1
                if switch is not None:
                    for out in switch.ingest(ev.payload):
                        start = max(now, egress_free)
                        egress_free = start + rng.exponential(1.0 / plan.download_rate)
                        self._push(heap, egress_free, EventKind.BCAST_ARRIVE, out.seq, out)
                if qhead < len(queue):
                    arrived, pkt = queue[qhead]
                    queue[qhead] = None
                    qhead += 1
                    if keep_waits:
                        waits.append(now - arrived)
                    self._push(heap, now + plan.service.sample(rng), EventKind.SVC_DONE, 0, pkt)
                else:
                    busy = False
            elif ev.kind is EventKind.BCAST_ARRIVE:
                received += 1
                broadcasts.append(ev.payload)
                last_bcast = now

        if received < expected_broadcasts:
            raise RuntimeError(
                f"phase ended with {received} of {expected_broadcasts} broadcasts delivered"
            )
        end_times = np.asarray(ready, dtype=np.float64).copy()
        if expected_broadcasts and last_bcast is not None:
            np.maximum(end_times, last_bcast, out=end_times)
        return PhaseResult(end_times, broadcasts, np.asarray(waits), emitted, served)


def run_round(packets_by_client, plan, switch, rng, start=0.0):
    """Time a single-phase round: train, upload, aggregate, broadcast.

    With no packets at all the round lasts as long as the slowest client's
    local training.
    """
    sim = NetworkSimulator(plan, rng)
    ready = sim.train(start)
    result = sim.transfer(ready, packets_by_client, switch)
    mean_wait = float(result.waits.mean()) if result.waits.size else 0.0
    return RoundTiming(
        duration=max(result.end, float(ready.max())) - start,
        train_end=float(ready.max()) - start,
        phase_ends=[result.end - start],
        mean_wait=mean_wait,
        emitted=result.emitted,
        served=result.served,
        broadcast=len(result.broadcasts),
    )


def simulate_queue_wait(arrival_rate, service, n_packets, rng, n_clients=1):
    """Mean switch queueing delay over ``n_packets`` Poisson arrivals.

    The total rate is split evenly across ``n_clients`` sources; the packets
    go through :meth:`NetworkSimulator.transfer` with a non-aggregating
    switch.
    """
    from .switch import Packet, Phase

    rng = check_random_state(rng)
    per_client = np.full(n_clients, arrival_rate / n_clients)
    plan = RatePlan(per_client, 5.0 * per_client.mean(), service, np.zeros(n_clients))
    dummy = Packet(0, Phase.DATA, 0, 0, b"")
    counts = np.full(n_clients, n_packets // n_clients)
    counts[: n_packets % n_clients] += 1
    packets = [[dummy] * int(c) for c in counts]
    sim = NetworkSimulator(plan, rng)
    result = sim.transfer(np.zeros(n_clients), packets, None)
    return float(result.waits.mean())
