import numpy as np
import pytest

from fediac.netsim import (
    SERVICE_MODELS,
    NetworkSimulator,
    RatePlan,
    ServiceModel,
    load_trace,
    mg1_mean_wait,
    run_round,
    service_time,
    simulate_queue_wait,
    synthetic_rates,
)
from fediac.switch import Packet, Phase, SwitchState, encode_packets


class TestTrace:
    def test_direct_assignment(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("1000\n2000\n")
        np.testing.assert_array_equal(load_trace(path, 2), [1000, 2000])

    def test_wrap_around(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("500\n")
        np.testing.assert_array_equal(load_trace(path, 3), [500, 500, 500])

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("10\n\nabc\n")
        with pytest.raises(ValueError, match=":3:"):
            load_trace(path, 2)

    def test_empty_rejected(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("\n\n")
        with pytest.raises(ValueError, match="empty"):
            load_trace(path, 2)

    def test_synthetic_range(self):
        rates = synthetic_rates(20, 0)
        assert rates.min() >= 200 and rates.max() <= 2800
        assert 200 <= rates.mean() <= 2800


class TestServiceTime:
    def test_kinds(self):
        assert SERVICE_MODELS["high"].mean == 3.03e-7
        assert SERVICE_MODELS["low"].mean == 3.03e-6
        with pytest.raises(ValueError):
            service_time("medium", 0)

    def test_high_mean(self, rng):
        s = SERVICE_MODELS["high"].sample(rng, 1_000_000)
        assert s.mean() == pytest.approx(3.03e-7, rel=0.01)
        assert np.all(s > 0)

    def test_low_variance_in_microseconds(self, rng):
        s = SERVICE_MODELS["low"].sample(rng, 1_000_000) * 1e6
        assert s.var() == pytest.approx(2.15e-8, rel=0.05)

    def test_zero_variance_is_constant(self, rng):
        model = ServiceModel(1e-6, 0.0)
        assert model.sample(rng) == 1e-6
        np.testing.assert_array_equal(model.sample(rng, 5), 1e-6)

    def test_truncation_keeps_positive(self, rng):
        assert np.all(ServiceModel(1.0, 4.0).sample(rng, 10_000) > 0)


def open_switch(n_clients, total, bits=8):
    state = SwitchState(n_clients)
    state.start_data_phase(0, total, bits)
    return state


def make_plan(rates, service=None, delay=1.0):
    service = service or ServiceModel(1e-4, 0.0)
    return RatePlan.build(rates, service, train_delay=delay)


class TestRound:
    def test_download_rate_multiplier(self):
        plan = make_plan([100.0, 300.0])
        assert plan.download_rate == pytest.approx(1000.0)

    def test_zero_packets(self):
        plan = RatePlan.build([10.0, 10.0], "high", train_delay=[1.0, 3.0])
        timing = run_round([[], []], plan, SwitchState(2), 0)
        assert timing.duration == 3.0

    def test_single_packet_no_queueing(self):
        plan = make_plan([1e9], ServiceModel(1e-3, 0.0), delay=2.0)
        pkts = [encode_packets(Phase.DATA, [1, 2], 8)]
        timing = run_round(pkts, plan, open_switch(1, 2), 1)
        assert timing.duration == pytest.approx(2.0 + 1e-3, abs=1e-6)
        assert timing.emitted == timing.served == timing.broadcast == 1

    def test_deterministic_per_seed(self, rng):
        plan = make_plan(synthetic_rates(4, 1))
        pkts = [encode_packets(Phase.DATA, np.arange(3000) % 7, 8, client_id=i)
                for i in range(4)]
        a = run_round(pkts, plan, open_switch(4, 3000), 5)
        b = run_round(pkts, plan, open_switch(4, 3000), 5)
        assert a == b

    def test_conservation(self):
        plan = make_plan(synthetic_rates(3, 2))
        pkts = [encode_packets(Phase.DATA, np.zeros(5000, int), 8, client_id=i)
                for i in range(3)]
        t = run_round(pkts, plan, open_switch(3, 5000), 3)
        assert t.emitted == t.served == 3 * len(pkts[0])
        assert t.broadcast == len(pkts[0])

    def test_faster_clients_never_slower(self):
        rates = synthetic_rates(4, 3)
        pkts = [encode_packets(Phase.DATA, np.zeros(4000, int), 8, client_id=i)
                for i in range(4)]
        slow = run_round(pkts, make_plan(rates), open_switch(4, 4000), 9).duration
        fast = run_round(pkts, make_plan(2 * rates), open_switch(4, 4000), 9).duration
        assert fast <= slow

    def test_event_times_non_decreasing(self):
        plan = make_plan([50.0, 80.0])
        sim = NetworkSimulator(plan, 0)
        pkts = [encode_packets(Phase.DATA, np.zeros(3000, int), 8, client_id=i)
                for i in range(2)]
        res = sim.transfer(np.zeros(2), pkts, open_switch(2, 3000))
        assert len(res.broadcasts) == len(pkts[0])
        assert np.all(res.waits >= 0)


class TestQueue:
    def test_pk_formula(self):
        model = ServiceModel(2.0, 1.0)
        assert mg1_mean_wait(0.25, model) == pytest.approx(0.25 * 5.0 / (2 * 0.5))
        with pytest.raises(ValueError, match="unstable"):
            mg1_mean_wait(0.5, model)

    @pytest.mark.parametrize("kind", ["high", "low"])
    def test_simulated_wait_matches_pk(self, kind, rng):
        model = SERVICE_MODELS[kind]
        rate = 0.5 / model.mean
        wait = simulate_queue_wait(rate, model, 100_000, rng)
        assert wait == pytest.approx(mg1_mean_wait(rate, model), rel=0.05)

    def test_dummy_payload_accepted(self, rng):
        model = ServiceModel(1.0, 0.0)
        assert simulate_queue_wait(0.1, model, 10, rng, n_clients=3) >= 0
        assert Packet(0, Phase.DATA, 0, 0, b"").nbytes == 16
