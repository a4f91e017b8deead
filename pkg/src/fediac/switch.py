"""Programmable-switch model: packet wire format, vote counting with GIA
thresholding, and slot-based pipelined integer aggregation under a memory
budget.

Wire format
-----------
Every packet is a 16-byte header of four little-endian ``uint32`` fields
(iteration, phase, client_id, seq) followed by a payload of at most 1484
bytes. Payloads are LSB-first bit streams: VOTE packets carry one bit per
dimension, DATA packets carry ``width``-bit two's complement integers
(value ``j`` occupies stream bits ``j*width .. j*width+width-1``). The last
byte of a payload is zero-padded. Payload length is implied by the phase
layout, which both ends know.
"""

import enum
import math
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

MAX_PACKET_BYTES = 1500
HEADER = struct.Struct("<4I")
HEADER_BYTES = HEADER.size
BROADCAST_ID = 0xFFFFFFFF
ACCUMULATOR_BITS = 32
VOTE_COUNTER_BYTES = 2
MAX_WIDTH = 32


class Phase(enum.IntEnum):
    VOTE = 0
    DATA = 1


class ProtocolError(RuntimeError):
    """A packet violated the aggregation protocol."""


class RoundTimeout(ProtocolError):
    """The round was aborted because some expected packets never arrived."""


@dataclass(frozen=True)
class Packet:
    iteration: int
    phase: Phase
    client_id: int
    seq: int
    payload: bytes

    @property
    def nbytes(self):
        return HEADER_BYTES + len(self.payload)

    def encode(self):
        buf = HEADER.pack(self.iteration, int(self.phase), self.client_id, self.seq) + self.payload
        if len(buf) > MAX_PACKET_BYTES:
            raise ProtocolError(f"packet of {len(buf)} bytes exceeds {MAX_PACKET_BYTES}")
        return buf

    @classmethod
    def decode(cls, buf):
        if len(buf) < HEADER_BYTES:
            raise ProtocolError("buffer shorter than the packet header")
        if len(buf) > MAX_PACKET_BYTES:
            raise ProtocolError(f"packet of {len(buf)} bytes exceeds {MAX_PACKET_BYTES}")
        iteration, phase, client_id, seq = HEADER.unpack_from(buf)
        return cls(iteration, Phase(phase), client_id, seq, bytes(buf[HEADER_BYTES:]))


def payload_capacity(width):
    """Values of ``width`` bits that fit in one packet."""
    _check_width(width)
    return (MAX_PACKET_BYTES - HEADER_BYTES) * 8 // width


def _check_width(width):
    if not 1 <= width <= MAX_WIDTH:
        raise ValueError(f"value width must be in [1, {MAX_WIDTH}], got {width}")


def pack_values(values, width):
    """Pack signed integers (or 0/1 bits when ``width == 1``) into bytes."""
    _check_width(width)
    v = np.asarray(values)
    if width == 1:
        return np.packbits(v.astype(np.uint8) & 1, bitorder="little").tobytes()
    v = v.astype(np.int64)
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if v.size and (v.min() < lo or v.max() > hi):
        raise ValueError(f"value outside the signed {width}-bit range")
    u = v & ((1 << width) - 1)
    bits = (u[:, None] >> np.arange(width, dtype=np.int64)) & 1
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def unpack_values(buf, width, count):
    _check_width(width)
    nbytes = math.ceil(count * width / 8)
    if len(buf) < nbytes:
        raise ProtocolError(f"payload has {len(buf)} bytes, need {nbytes}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes),
                         bitorder="little")[: count * width]
    if width == 1:
        return bits.astype(bool)
    bits = bits.reshape(count, width).astype(np.int64)
    u = bits @ (np.int64(1) << np.arange(width, dtype=np.int64))
    return np.where(u >= (1 << (width - 1)), u - (1 << width), u)


def encode_packets(phase, data, bits=None, capacity=None, iteration=0, client_id=0):
    """Split a vote array or an integer vector into packets.

    Parameters
    ----------
    phase : Phase
    data : array-like
        Vote bits for VOTE, signed integers for DATA.
    bits : int, optional
        DATA value width; ignored for VOTE.
    capacity : int, optional
        Values per packet. Defaults to the most that fit in 1500 bytes.
    """
    phase = Phase(phase)
    width = 1 if phase is Phase.VOTE else bits
    if width is None:
        raise ValueError("DATA packets need a bit width")
    if width > MAX_WIDTH:
        raise ValueError(f"bit width {width} exceeds {MAX_WIDTH}")
    cap = payload_capacity(width) if capacity is None else capacity
    if not 1 <= cap <= payload_capacity(width):
        raise ValueError(f"capacity must lie in [1, {payload_capacity(width)}]")
    data = np.asarray(data)
    return [
        Packet(iteration, phase, client_id, seq, pack_values(data[start:start + cap], width))
        for seq, start in enumerate(range(0, data.size, cap))
    ]


def decode_packets(packets, width, total, capacity=None):
    """Inverse of :func:`encode_packets` for a complete, seq-ordered packet list."""
    cap = payload_capacity(width) if capacity is None else capacity
    parts = []
    for p in sorted(packets, key=lambda p: p.seq):
        count = min(cap, total - p.seq * cap)
        parts.append(unpack_values(p.payload, width, count))
    if not parts:
        return np.zeros(0, dtype=bool if width == 1 else np.int64)
    return np.concatenate(parts)


def packet_count(total, width, capacity=None):
    cap = payload_capacity(width) if capacity is None else capacity
    return math.ceil(total / cap)


def _wrap32(x):
    return ((x + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


@dataclass
class _Slot:
    acc: np.ndarray
    arrived: set
    expected: frozenset
    nbytes: int


@dataclass(frozen=True)
class _Layout:
    iteration: int
    phase: Phase
    width: int
    out_width: int
    total: int
    capacity: int
    expected: dict

    def count(self, seq):
        return min(self.capacity, self.total - seq * self.capacity)


class SwitchState:
    """Memory-bounded aggregation state machine of a single switch.

    A phase is opened with :meth:`start_vote_phase` or
    :meth:`start_data_phase`; packets are then fed one by one to
    :meth:`ingest`, which returns the broadcast packets completed by that
    arrival. A slot holds one packet-sequence position until every expected
    client has contributed; packets that need a new slot while memory is
    exhausted wait in a FIFO.

    Attributes
    ----------
    agg_count : int
        Packets folded into slots so far (one per client packet).
    completed : int
        Slot aggregations finished so far (one per broadcast).
    peak_bytes : int
        Largest live accumulator footprint observed.
    """

    def __init__(self, n_clients, memory_budget=1 << 20, threshold=1):
        if n_clients < 1:
            raise ValueError("n_clients must be positive")
        if not 1 <= threshold <= n_clients:
            raise ValueError(f"threshold must lie in [1, {n_clients}]")
        self.n_clients = n_clients
        self.memory_budget = memory_budget
        self.threshold = threshold
        self.agg_count = 0
        self.completed = 0
        self.live_bytes = 0
        self.peak_bytes = 0
        self.slots = {}
        # seqs waiting for a slot, in arrival order, each with its queued packets
        self.pending = {}
        self._pending_keys = set()
        self.vote_counts = None
        self._layout = None
        self._done = set()

    # -- phase setup ---------------------------------------------------

    def start_vote_phase(self, iteration, dim, capacity=None):
        cap = payload_capacity(1) if capacity is None else capacity
        self.vote_counts = np.zeros(dim, dtype=np.int64)
        self._open(iteration, Phase.VOTE, 1, 1, dim, cap, None)

    def start_data_phase(self, iteration, total, bits, capacity=None, contributors=None,
                         out_bits=None):
        """Open a DATA phase of ``total`` values at ``bits`` bits each.

        ``contributors`` maps seq to the client ids that will send it; by
        default every client sends every seq. Broadcasts are encoded at
        ``out_bits`` (default ``bits``).
        """
        if bits > MAX_WIDTH:
            raise ValueError(f"bit width {bits} exceeds {MAX_WIDTH}")
        cap = payload_capacity(bits) if capacity is None else capacity
        out = bits if out_bits is None else out_bits
        self._open(iteration, Phase.DATA, bits, out, total, cap, contributors)

    def _open(self, iteration, phase, width, out_width, total, cap, contributors):
        if self.slots or self.pending:
            raise ProtocolError("previous phase still has live slots or pending packets")
        n_seq = math.ceil(total / cap)
        everyone = frozenset(range(self.n_clients))
        if contributors is None:
            expected = {s: everyone for s in range(n_seq)}
        else:
            expected = {int(s): frozenset(c) for s, c in contributors.items() if c}
            if any(not 0 <= s < n_seq for s in expected):
                raise ProtocolError("contributor map names a seq outside the layout")
        per_value = VOTE_COUNTER_BYTES if phase is Phase.VOTE else ACCUMULATOR_BITS // 8
        if n_seq and min(cap, total) * per_value > self.memory_budget:
            raise ProtocolError("a single slot does not fit in the memory budget")
        self._layout = _Layout(iteration, phase, width, out_width, total, cap, expected)
        self._done = set()

    @property
    def phase_complete(self):
        lay = self._layout
        return lay is not None and len(self._done) == len(lay.expected)

    # -- packet path ---------------------------------------------------

    def ingest(self, packet):
        """Fold one client packet; return the broadcast packets it completes."""
        lay = self._layout
        if lay is None:
            raise ProtocolError("no phase is open")
        if packet.phase != lay.phase or packet.iteration != lay.iteration:
            raise ProtocolError(
                f"packet for iteration {packet.iteration} phase {packet.phase!r} "
                f"does not match the open phase"
            )
        seq, cid = packet.seq, packet.client_id
        if seq not in lay.expected:
            raise ProtocolError(f"seq {seq} outside the expected range")
        if cid not in lay.expected[seq]:
            raise ProtocolError(f"client {cid} is not expected to send seq {seq}")
        if seq in self._done:
            raise ProtocolError(f"duplicate packet from client {cid} for seq {seq}")
        slot = self.slots.get(seq)
        if slot is not None and cid in slot.arrived:
            raise ProtocolError(f"duplicate packet from client {cid} for seq {seq}")
        if (seq, cid) in self._pending_keys:
            raise ProtocolError(f"duplicate packet from client {cid} for seq {seq}")

        out = []
        if slot is not None:
            self._fold(slot, packet, out)
        elif seq not in self.pending and not self.pending and self._fits(seq):
            self._fold(self._allocate(seq), packet, out)
        else:
            self.pending.setdefault(seq, deque()).append(packet)
            self._pending_keys.add((seq, cid))
        self._drain(out)
        return out

    def _slot_bytes(self, seq):
        lay = self._layout
        per_value = VOTE_COUNTER_BYTES if lay.phase is Phase.VOTE else ACCUMULATOR_BITS // 8
        return lay.count(seq) * per_value

    def _fits(self, seq):
        return self.live_bytes + self._slot_bytes(seq) <= self.memory_budget

    def _allocate(self, seq):
        nbytes = self._slot_bytes(seq)
        slot = _Slot(np.zeros(self._layout.count(seq), dtype=np.int64), set(),
                     self._layout.expected[seq], nbytes)
        self.slots[seq] = slot
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        assert self.live_bytes <= self.memory_budget
        return slot

    def _fold(self, slot, packet, out):
        lay = self._layout
        vals = unpack_values(packet.payload, lay.width, lay.count(packet.seq))
        slot.acc = _wrap32(slot.acc + vals.astype(np.int64))
        slot.arrived.add(packet.client_id)
        self.agg_count += 1
        if slot.arrived == slot.expected:
            out.append(self._complete(packet.seq, slot))

    def _complete(self, seq, slot):
        lay = self._layout
        del self.slots[seq]
        self.live_bytes -= slot.nbytes
        self.completed += 1
        self._done.add(seq)
        if lay.phase is Phase.VOTE:
            start = seq * lay.capacity
            self.vote_counts[start:start + slot.acc.size] = slot.acc
            payload = pack_values(slot.acc >= self.threshold, 1)
        else:
            try:
                payload = pack_values(slot.acc, lay.out_width)
            except ValueError as exc:
                raise ProtocolError(f"aggregate for seq {seq} overflows "
                                    f"{lay.out_width} bits") from exc
        return Packet(lay.iteration, lay.phase, BROADCAST_ID, seq, payload)

    def _drain(self, out):
        while self.pending:
            seq = next(iter(self.pending))
            if not self._fits(seq):
                break
            slot = self._allocate(seq)
            for packet in self.pending.pop(seq):
                self._pending_keys.discard((seq, packet.client_id))
                self._fold(slot, packet, out)

    def check_timeout(self):
        """Abort the round if the open phase has not completed."""
        if not self.phase_complete:
            missing = sorted(set(self._layout.expected) - self._done) if self._layout else []
            raise RoundTimeout(f"round aborted: seqs {missing[:8]} never completed")


def aggregation_count(state):
    """Slot aggregations completed by ``state`` (one per broadcast packet).

    Per-packet folds are available as ``state.agg_count``.
    """
    return state.completed


def aggregate_votes(state, vote_packets, iteration=None, dim=None, capacity=None):
    """Run a whole vote phase and return ``(counts, gia)``.

    If ``dim`` is given a fresh vote phase is opened first; otherwise one
    must already be open. Raises :class:`RoundTimeout` when some client's
    packets are missing.
    """
    if dim is not None:
        it = vote_packets[0].iteration if iteration is None and vote_packets else (iteration or 0)
        state.start_vote_phase(it, dim, capacity)
    broadcasts = []
    for p in vote_packets:
        broadcasts.extend(state.ingest(p))
    state.check_timeout()
    lay = state._layout
    gia = decode_packets(broadcasts, 1, lay.total, lay.capacity)
    return state.vote_counts.copy(), gia


def ingest_data_packet(state, packet):
    return state.ingest(packet)


class FloatAggregator:
    """Server-side float32 aggregation with the same ingest interface.

    Used by the dense baseline, which bypasses the switch integer path.
    """

    width = 32

    def __init__(self, n_clients):
        self.n_clients = n_clients
        self.agg_count = 0
        self.completed = 0
        self._acc = {}
        self._total = 0
        self._cap = payload_capacity(32)
        self._iteration = 0

    def start_data_phase(self, iteration, total, capacity=None):
        self._iteration = iteration
        self._total = total
        self._cap = payload_capacity(32) if capacity is None else capacity
        self._acc = {}

    def ingest(self, packet):
        count = min(self._cap, self._total - packet.seq * self._cap)
        vals = np.frombuffer(packet.payload, dtype="<f4", count=count).astype(np.float64)
        acc, seen = self._acc.setdefault(packet.seq, [np.zeros(count), set()])
        if packet.client_id in seen:
            raise ProtocolError(f"duplicate packet from client {packet.client_id}")
        acc += vals
        seen.add(packet.client_id)
        self.agg_count += 1
        if len(seen) < self.n_clients:
            return []
        del self._acc[packet.seq]
        self.completed += 1
        return [Packet(self._iteration, Phase.DATA, BROADCAST_ID, packet.seq,
                       acc.astype("<f4").tobytes())]


def encode_float_packets(values, iteration=0, client_id=0, capacity=None):
    cap = payload_capacity(32) if capacity is None else capacity
    v = np.asarray(values, dtype="<f4")
    return [Packet(iteration, Phase.DATA, client_id, seq, v[start:start + cap].tobytes())
            for seq, start in enumerate(range(0, v.size, cap))]


def decode_float_packets(packets, total, capacity=None):
    cap = payload_capacity(32) if capacity is None else capacity
    parts = [np.frombuffer(p.payload, dtype="<f4", count=min(cap, total - p.seq * cap))
             for p in sorted(packets, key=lambda p: p.seq)]
    return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)
