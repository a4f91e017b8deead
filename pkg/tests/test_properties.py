import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fediac.analysis import PowerLawFit, upload_prob, vote_prob
from fediac.compression import compress, make_quant_config, quantize, residual_update
from fediac.switch import (
    Phase,
    SwitchState,
    decode_packets,
    encode_packets,
    pack_values,
    unpack_values,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.integers(1, 200), elements=finite), st.integers(0, 2**32 - 1))
def test_quantize_stays_between_neighbours(x, seed):
    q = quantize(x, seed)
    assert np.all((q == np.floor(x)) | (q == np.ceil(x)))


@given(st.integers(1, 32), st.data())
def test_pack_round_trip(width, data):
    n = data.draw(st.integers(0, 300))
    if width == 1:
        vals = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)), bool)
    else:
        lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
        vals = np.array(data.draw(st.lists(st.integers(lo, hi), min_size=n, max_size=n)),
                        dtype=np.int64)
    assert np.array_equal(unpack_values(pack_values(vals, width), width, n), vals)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 400), st.integers(6, 16), st.integers(1, 100),
       st.integers(0, 2**32 - 1))
def test_switch_sum_equals_integer_sum(n, d, bits, cap, seed):
    rng = np.random.default_rng(seed)
    lim = (1 << (bits - 1)) // n - 1
    vals = rng.integers(-lim, lim + 1, (n, d))
    state = SwitchState(n, memory_budget=int(rng.integers(4 * min(cap, d), 4 * d + 5)))
    state.start_data_phase(0, d, bits, cap)
    packets = [p for i in range(n) for p in encode_packets(Phase.DATA, vals[i], bits, cap,
                                                           client_id=i)]
    out = []
    for j in rng.permutation(len(packets)):
        out.extend(state.ingest(packets[j]))
    state.check_timeout()
    assert np.array_equal(decode_packets(out, bits, d, cap), vals.sum(axis=0))
    assert state.peak_bytes <= state.memory_budget


@given(arrays(np.float64, st.integers(1, 100),
              elements=st.floats(-10, 10, allow_subnormal=False)),
       st.integers(2, 24), st.integers(0, 2**32 - 1))
def test_residual_identity(u, bits, seed):
    rng = np.random.default_rng(seed)
    m = float(np.max(np.abs(u)))
    if m == 0 or (1 << (bits - 1)) <= 3:
        return
    cfg = make_quant_config(bits, 3, m)
    gia = rng.random(u.size) < 0.5
    comp = compress(u, gia, cfg, rng)
    e = residual_update(u, comp, cfg)
    assert np.allclose(cfg.scale * u, comp.to_dense() + cfg.scale * e, atol=1e-6)


@given(st.floats(0, 1), st.integers(1, 60), st.data())
def test_upload_prob_is_a_probability_and_monotone(q, n, data):
    a = data.draw(st.integers(1, n))
    r = upload_prob(q, n, a)
    assert 0.0 <= r <= 1.0
    if a < n:
        assert upload_prob(q, n, a + 1) <= r + 1e-15


@given(st.floats(1e-300, 1.0), st.integers(1, 10**6))
def test_vote_prob_bounds(p, k):
    v = vote_prob(p, k)
    assert p - 1e-15 <= v <= 1.0


@given(st.floats(-3, -0.01), st.floats(0.01, 100))
def test_power_law_magnitudes_descend(alpha, phi):
    mags = PowerLawFit(alpha, phi).magnitudes(50)
    assert np.all(np.diff(mags) < 0)
