"""One global aggregation round per algorithm.

Every function here takes the stacked client updates of the round (rows
are clients, already including any carried residual), moves the packets
through the network simulator and the switch, and returns a
:class:`RoundResult` holding the model delta every client subtracts.
"""

import enum
from dataclasses import dataclass

import numpy as np

from ..analysis import InfeasibleSettingError, ThresholdTuner
from ..compression import compress, make_quant_config, quantize, residual_update, safe_vote
from ..switch import (
    Phase,
    decode_float_packets,
    decode_packets,
    encode_float_packets,
    encode_packets,
    payload_capacity,
    unpack_values,
)

# bytes for the one-scalar max-magnitude exchange, each way, per client
SCALAR_BYTES = 4
# client-side bootstrap: (alpha, phi) up and (a, b) down, per client
FIT_REPORT_BYTES = 8
SETTING_BYTES = 8


class Algorithm(str, enum.Enum):
    FEDIAC = "fediac"
    SWITCHML = "switchml"
    TOPK_BLOCK = "topk_block"
    DENSE = "dense"


@dataclass
class RoundResult:
    delta: np.ndarray
    residuals: np.ndarray | None
    upload_bytes: int
    download_bytes: int
    end_time: float
    gia_density: float
    scale: float | None = None
    gia: np.ndarray | None = None


@dataclass
class Network:
    """What a round needs from the environment: simulator, switch and float server."""

    sim: object
    switch: object
    server: object
    ready: np.ndarray


def _bytes(packet_lists):
    return sum(p.nbytes for pkts in packet_lists for p in pkts)


def _scatter(broadcasts, width, total, capacity, out):
    for p in broadcasts:
        start = p.seq * capacity
        count = min(capacity, total - start)
        out[start:start + count] = unpack_values(p.payload, width, count)
    return out


def _max_abs(updates, fixed_max_abs):
    if fixed_max_abs is None:
        return float(np.max(np.abs(updates))), updates
    return fixed_max_abs, np.clip(updates, -fixed_max_abs, fixed_max_abs)


def run_fediac_round(updates, net, iteration, votes, bits, rng, fixed_max_abs=None):
    """Vote, deduce the GIA on the switch, then upload and aggregate the GIA positions.

    The switch must already carry the vote threshold. With ``fixed_max_abs``
    the run-wide magnitude is used and updates are clipped to it before
    quantization; the clipped-off mass stays in the residual.
    """
    n, d = updates.shape
    max_abs, clipped = _max_abs(updates, fixed_max_abs)

    vote_bits = [safe_vote(u, votes, rng) for u in updates]
    vote_pkts = [encode_packets(Phase.VOTE, v, iteration=iteration, client_id=i)
                 for i, v in enumerate(vote_bits)]
    net.switch.start_vote_phase(iteration, d)
    phase1 = net.sim.transfer(net.ready, vote_pkts, net.switch)
    net.switch.check_timeout()
    gia = decode_packets(phase1.broadcasts, 1, d)
    up = _bytes(vote_pkts) + n * SCALAR_BYTES
    down = n * _bytes([phase1.broadcasts]) + n * SCALAR_BYTES

    kept = int(gia.sum())
    delta = np.zeros(d)
    if kept == 0 or max_abs == 0.0:
        return RoundResult(delta, updates.copy(), up, down, phase1.end, 0.0, None, gia)

    cfg = make_quant_config(bits, n, max_abs)
    residuals = np.empty_like(updates)
    data_pkts = []
    for i in range(n):
        comp = compress(clipped[i], gia, cfg, rng)
        residuals[i] = residual_update(clipped[i], comp, cfg) + (updates[i] - clipped[i])
        data_pkts.append(encode_packets(Phase.DATA, comp.values, bits,
                                        iteration=iteration, client_id=i))
    net.switch.start_data_phase(iteration, kept, bits)
    phase2 = net.sim.transfer(phase1.end_times, data_pkts, net.switch)
    net.switch.check_timeout()
    sums = decode_packets(phase2.broadcasts, bits, kept)
    delta[np.flatnonzero(gia)] = sums / (n * cfg.scale)
    up += _bytes(data_pkts)
    down += n * _bytes([phase2.broadcasts])
    return RoundResult(delta, residuals, up, down, phase2.end, kept / d, cfg.scale, gia)


def _integer_round(quantized, net, iteration, bits, cfg, contributors=None, sent=None):
    n, d = quantized.shape
    packets = []
    for i in range(n):
        pkts = encode_packets(Phase.DATA, quantized[i], bits, iteration=iteration, client_id=i)
        if sent is not None:
            pkts = [p for p in pkts if p.seq in sent[i]]
        packets.append(pkts)
    net.switch.start_data_phase(iteration, d, bits, contributors=contributors)
    phase = net.sim.transfer(net.ready, packets, net.switch)
    net.switch.check_timeout()
    sums = _scatter(phase.broadcasts, bits, d, payload_capacity(bits), np.zeros(d, np.int64))
    up = _bytes(packets) + n * SCALAR_BYTES
    down = n * _bytes([phase.broadcasts]) + n * SCALAR_BYTES
    return sums / (n * cfg.scale), up, down, phase.end


def run_switchml_round(updates, net, iteration, bits, rng, fixed_max_abs=None):
    """Quantize every coordinate to ``bits`` bits and aggregate densely on the switch."""
    n, d = updates.shape
    max_abs, clipped = _max_abs(updates, fixed_max_abs)
    if max_abs == 0.0:
        return _empty_round(updates, net, residuals=None)
    cfg = make_quant_config(bits, n, max_abs)
    quantized = quantize(cfg.scale * clipped, rng)
    delta, up, down, end = _integer_round(quantized, net, iteration, bits, cfg)
    return RoundResult(delta, None, up, down, end, 1.0, cfg.scale)


def run_topk_block_round(updates, net, iteration, bits, topk_frac, rng, fixed_max_abs=None):
    """Top-k sparsify with residual feedback, then upload only non-empty packet blocks."""
    n, d = updates.shape
    kk = max(1, int(round(topk_frac * d)))
    max_abs, clipped = _max_abs(updates, fixed_max_abs)
    if max_abs == 0.0:
        return _empty_round(updates, net, residuals=updates.copy())
    cfg = make_quant_config(bits, n, max_abs)
    cap = payload_capacity(bits)
    quantized = np.zeros((n, d), dtype=np.int64)
    residuals = updates.copy()
    sent, contributors = [], {}
    for i in range(n):
        sel = np.sort(np.argpartition(np.abs(updates[i]), d - kk)[d - kk:])
        q = quantize(cfg.scale * clipped[i, sel], rng)
        quantized[i, sel] = q
        residuals[i, sel] = updates[i, sel] - q / cfg.scale
        blocks = set(np.unique(sel // cap).tolist())
        sent.append(blocks)
        for s in blocks:
            contributors.setdefault(s, set()).add(i)
    delta, up, down, end = _integer_round(quantized, net, iteration, bits, cfg,
                                          contributors=contributors, sent=sent)
    return RoundResult(delta, residuals, up, down, end, kk / d, cfg.scale)


def run_dense_round(updates, net, iteration):
    """Float32 aggregation on a server; the accuracy and traffic reference."""
    n, d = updates.shape
    packets = [encode_float_packets(u, iteration=iteration, client_id=i)
               for i, u in enumerate(updates)]
    net.server.start_data_phase(iteration, d)
    phase = net.sim.transfer(net.ready, packets, net.server)
    sums = decode_float_packets(phase.broadcasts, d)
    up = _bytes(packets)
    down = n * _bytes([phase.broadcasts])
    return RoundResult(sums / n, None, up, down, phase.end, 1.0)


def _empty_round(updates, net, residuals):
    return RoundResult(np.zeros(updates.shape[1]), residuals, 0, 0,
                       float(np.max(net.ready)), 0.0)


def run_baseline_round(algorithm, updates, net, iteration, rng, bits=12, topk_frac=0.05,
                       fixed_max_abs=None):
    algorithm = Algorithm(algorithm)
    if algorithm is Algorithm.SWITCHML:
        return run_switchml_round(updates, net, iteration, bits, rng, fixed_max_abs)
    if algorithm is Algorithm.TOPK_BLOCK:
        return run_topk_block_round(updates, net, iteration, bits, topk_frac, rng,
                                    fixed_max_abs)
    if algorithm is Algorithm.DENSE:
        return run_dense_round(updates, net, iteration)
    raise ValueError(f"{algorithm.value} is not a baseline")


@dataclass(frozen=True)
class BootstrapOutcome:
    threshold: int
    bits: int
    fit: object | None
    gamma: float | None
    fell_back: bool


def bootstrap_first_round(updates, tuner, fallback_threshold, fallback_bits):
    """Choose the vote threshold and bit width from one round of dense updates.

    A degenerate magnitude profile (all zero, or fewer than two non-zero
    entries) falls back to the given pair. An infeasible setting propagates
    as :class:`InfeasibleSettingError`.
    """
    try:
        tuner.fit(updates)
    except InfeasibleSettingError:
        raise
    except ValueError:
        return BootstrapOutcome(fallback_threshold, fallback_bits, None, None, True)
    return BootstrapOutcome(tuner.threshold_, tuner.bits_, tuner.fit_, tuner.gamma_, False)


def make_tuner(vote_frac, candidates, traffic_budget, max_bits=32, pooling="profile"):
    return ThresholdTuner(vote_frac=vote_frac, candidates=tuple(candidates),
                          traffic_budget=traffic_budget, max_bits=max_bits, pooling=pooling)
