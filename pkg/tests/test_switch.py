import numpy as np
import pytest

from fediac.switch import (
    BROADCAST_ID,
    HEADER_BYTES,
    MAX_PACKET_BYTES,
    FloatAggregator,
    Packet,
    Phase,
    ProtocolError,
    RoundTimeout,
    SwitchState,
    aggregate_votes,
    aggregation_count,
    decode_float_packets,
    decode_packets,
    encode_float_packets,
    encode_packets,
    pack_values,
    packet_count,
    payload_capacity,
    unpack_values,
)


def top_k_mask(u, k):
    mask = np.zeros(len(u), bool)
    mask[np.argsort(-np.abs(np.asarray(u, float)), kind="stable")[:k]] = True
    return mask


def run_data_phase(state, client_values, bits, iteration=0, capacity=None, order=None, rng=None):
    packets = [p for cid, v in enumerate(client_values)
               for p in encode_packets(Phase.DATA, v, bits, capacity, iteration, cid)]
    if rng is not None:
        packets = [packets[i] for i in rng.permutation(len(packets))]
    state.start_data_phase(iteration, len(client_values[0]), bits, capacity)
    out = []
    for p in packets:
        out.extend(state.ingest(p))
    state.check_timeout()
    return decode_packets(out, bits, len(client_values[0]), capacity), out


class TestWireFormat:
    def test_header_round_trip(self):
        p = Packet(7, Phase.DATA, 3, 2, b"\x01\x02")
        buf = p.encode()
        assert len(buf) == HEADER_BYTES + 2
        assert buf[:4] == (7).to_bytes(4, "little")
        assert Packet.decode(buf) == p

    def test_vote_bits_golden_bytes(self):
        pkt = encode_packets(Phase.VOTE, [1, 1, 1, 0, 0])[0]
        assert pkt.payload == bytes([0b00000111])

    def test_signed_values_golden_bytes(self):
        # 4-bit two's complement, LSB first: -1 -> 1111, 2 -> 0100
        assert pack_values([-1, 2], 4) == bytes([0b00101111])

    @pytest.mark.parametrize("width", [1, 3, 7, 12, 16, 31, 32])
    def test_pack_round_trip(self, rng, width):
        if width == 1:
            vals = rng.random(333) < 0.5
        else:
            lo, hi = -(1 << (width - 1)), (1 << (width - 1))
            vals = rng.integers(lo, hi, 333)
        np.testing.assert_array_equal(unpack_values(pack_values(vals, width), width, 333), vals)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            pack_values([8], 4)

    def test_packet_count_example(self):
        assert payload_capacity(12) == 989
        assert packet_count(10_000, 12) == 11
        pkts = encode_packets(Phase.DATA, np.zeros(10_000, int), 12)
        assert len(pkts) == 11
        assert all(p.nbytes <= MAX_PACKET_BYTES for p in pkts)

    def test_oversized_packet_rejected(self):
        with pytest.raises(ProtocolError):
            Packet(0, Phase.DATA, 0, 0, bytes(MAX_PACKET_BYTES)).encode()
        with pytest.raises(ProtocolError):
            Packet.decode(b"\x00" * 3)

    def test_encode_decode_multi_packet(self, rng):
        vals = rng.integers(-500, 500, 5000)
        pkts = encode_packets(Phase.DATA, vals, 11)
        np.testing.assert_array_equal(decode_packets(pkts[::-1], 11, 5000), vals)


class TestMotivationExample:
    U1 = [5, 4, 3, 2, 1]
    U2 = [1, 3, 4, 5, 2]

    def test_gia_and_aggregation_counts(self):
        votes = [top_k_mask(self.U1, 3), top_k_mask(self.U2, 3)]
        state = SwitchState(2, threshold=2)
        packets = [encode_packets(Phase.VOTE, v, client_id=i)[0] for i, v in enumerate(votes)]
        counts, gia = aggregate_votes(state, packets, iteration=0, dim=5)
        np.testing.assert_array_equal(counts, [1, 2, 2, 1, 0])
        assert "".join(str(int(b)) for b in gia) == "01100"

        # one vote aggregation plus one per surviving value
        kept = [np.asarray(u)[gia] for u in (self.U1, self.U2)]
        sums, _ = run_data_phase(state, kept, 8, iteration=1, capacity=1)
        np.testing.assert_array_equal(sums, [7, 7])
        dense = SwitchState(2)
        run_data_phase(dense, [self.U1, self.U2], 8, capacity=1)
        assert (aggregation_count(state), aggregation_count(dense)) == (3, 5)
        assert dense.agg_count == 10


class TestSwitchState:
    def test_random_instances_match_integer_sum(self, rng):
        for _ in range(20):
            n, d, bits = rng.integers(1, 9), rng.integers(1, 1000), rng.integers(6, 20)
            lim = (1 << (bits - 1)) // n - 1
            vals = rng.integers(-lim, lim + 1, (n, d))
            cap = int(rng.integers(1, payload_capacity(bits) + 1))
            budget = int(rng.integers(4 * min(cap, d), 4 * d + 8))
            state = SwitchState(n, memory_budget=budget)
            sums, out = run_data_phase(state, list(vals), bits, capacity=cap, rng=rng)
            np.testing.assert_array_equal(sums, vals.sum(axis=0))
            assert state.peak_bytes <= budget
            assert all(p.client_id == BROADCAST_ID for p in out)

    def test_memory_pressure_queues_packets(self):
        state = SwitchState(2, memory_budget=4 * 10)
        vals = [np.arange(30), np.arange(30)]
        sums, _ = run_data_phase(state, vals, 10, capacity=10)
        np.testing.assert_array_equal(sums, 2 * np.arange(30))
        assert state.peak_bytes == 40

    def test_slot_larger_than_budget_rejected(self):
        with pytest.raises(ProtocolError, match="memory budget"):
            SwitchState(2, memory_budget=8).start_data_phase(0, 100, 8)

    def test_duplicate_packet_rejected(self):
        state = SwitchState(2)
        state.start_data_phase(0, 4, 8)
        p = encode_packets(Phase.DATA, [1, 2, 3, 4], 8)[0]
        state.ingest(p)
        with pytest.raises(ProtocolError, match="duplicate"):
            state.ingest(p)

    def test_wrong_iteration_rejected(self):
        state = SwitchState(1)
        state.start_data_phase(3, 4, 8)
        with pytest.raises(ProtocolError):
            state.ingest(encode_packets(Phase.DATA, [1, 2, 3, 4], 8, iteration=2)[0])

    def test_missing_client_times_out(self):
        state = SwitchState(2)
        state.start_data_phase(0, 4, 8)
        state.ingest(encode_packets(Phase.DATA, [1, 2, 3, 4], 8, client_id=0)[0])
        with pytest.raises(RoundTimeout):
            state.check_timeout()

    def test_overflowing_aggregate_raises(self):
        state = SwitchState(2)
        state.start_data_phase(0, 1, 4)
        state.ingest(encode_packets(Phase.DATA, [7], 4, client_id=0)[0])
        with pytest.raises(ProtocolError, match="overflows"):
            state.ingest(encode_packets(Phase.DATA, [7], 4, client_id=1)[0])

    def test_contributor_map(self):
        state = SwitchState(3)
        state.start_data_phase(0, 4, 8, capacity=2, contributors={0: {0, 2}, 1: {1}})
        a = encode_packets(Phase.DATA, [1, 2, 0, 0], 8, 2, client_id=0)[0]
        b = encode_packets(Phase.DATA, [3, 4, 0, 0], 8, 2, client_id=2)[0]
        c = encode_packets(Phase.DATA, [0, 0, 5, 6], 8, 2, client_id=1)[1]
        out = state.ingest(a) + state.ingest(b) + state.ingest(c)
        np.testing.assert_array_equal(decode_packets(out, 8, 4, 2), [4, 6, 5, 6])
        with pytest.raises(ProtocolError):
            state.ingest(encode_packets(Phase.DATA, [0, 0, 1, 1], 8, 2, client_id=0)[1])

    def test_vote_counts_across_packets(self, rng):
        n, d = 5, 30_000
        votes = rng.random((n, d)) < 0.2
        state = SwitchState(n, threshold=2)
        packets = [p for i, v in enumerate(votes)
                   for p in encode_packets(Phase.VOTE, v, client_id=i)]
        counts, gia = aggregate_votes(state, packets, iteration=0, dim=d)
        np.testing.assert_array_equal(counts, votes.sum(axis=0))
        np.testing.assert_array_equal(gia, votes.sum(axis=0) >= 2)


class TestFloatAggregator:
    def test_float32_sum(self, rng):
        vals = rng.normal(size=(3, 1000)).astype(np.float32)
        agg = FloatAggregator(3)
        agg.start_data_phase(0, 1000)
        out = []
        for i, v in enumerate(vals):
            for p in encode_float_packets(v, client_id=i):
                out.extend(agg.ingest(p))
        np.testing.assert_allclose(decode_float_packets(out, 1000), vals.sum(axis=0),
                                   rtol=1e-5, atol=1e-5)
        assert agg.agg_count == 3 * len(encode_float_packets(vals[0]))
