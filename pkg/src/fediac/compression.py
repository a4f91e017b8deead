"""Client-side codec: magnitude-proportional voting, unbiased integer
quantization, GIA-masked sparsification and residual error feedback.

All randomness comes from an explicit :class:`numpy.random.Generator`, so
every function here is pure given its generator.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_mask, check_positive_int, check_random_state, check_vector


@dataclass(frozen=True)
class QuantConfig:
    """Scaling setup for ``bits``-wide integer aggregation over ``n_clients``.

    ``scale`` is chosen so that the sum of ``n_clients`` quantized values,
    each bounded by ``max_abs`` before scaling, cannot leave the signed
    ``bits``-bit range.
    """

    bits: int
    n_clients: int
    max_abs: float
    scale: float

    @property
    def limit(self):
        """Largest magnitude an aggregate may take, ``2**(bits-1)``."""
        return 1 << (self.bits - 1)


def make_quant_config(bits, n_clients, max_abs):
    """Build a :class:`QuantConfig` with ``scale = (2**(bits-1) - N) / (N * max_abs)``.

    Raises
    ------
    ValueError
        If ``2**(bits-1) <= n_clients`` (non-positive scale), ``max_abs <= 0``
        or ``max_abs`` is so small that the scale overflows. All-zero update
        vectors must be handled upstream.
    """
    bits = check_positive_int(bits, "bits", minimum=2)
    n_clients = check_positive_int(n_clients, "n_clients")
    max_abs = float(max_abs)
    if not np.isfinite(max_abs) or max_abs <= 0.0:
        raise ValueError(f"max_abs must be positive and finite, got {max_abs}")
    headroom = (1 << (bits - 1)) - n_clients
    if headroom <= 0:
        raise ValueError(
            f"2**(bits-1) = {1 << (bits - 1)} must exceed n_clients = {n_clients}; "
            "use more bits"
        )
    scale = headroom / (n_clients * max_abs)
    if not np.isfinite(scale):
        raise ValueError(f"max_abs = {max_abs} is too small; the scale overflows")
    return QuantConfig(bits, n_clients, max_abs, scale)


def quantize(x, rng):
    """Stochastically round every entry of ``x`` to a neighbouring integer.

    Each entry becomes ``ceil(x)`` with probability ``x - floor(x)`` and
    ``floor(x)`` otherwise, so the expectation equals ``x``. Integers are
    fixed points.
    """
    rng = check_random_state(rng)
    x = np.asarray(x, dtype=np.float64)
    low = np.floor(x)
    up = rng.random(x.shape) < (x - low)
    return (low + up).astype(np.int64)


def quantize_value(x, rng):
    """Scalar form of :func:`quantize`."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("cannot quantize a non-finite value")
    return int(quantize(np.array([x]), rng)[0])


def vote_many(u, votes, n_voters, rng):
    """Draw ``n_voters`` independent vote arrays for the same update vector.

    Each voter performs ``votes`` categorical draws with replacement, index
    ``l`` having probability ``|u_l| / sum|u|``; drawn indices are set and
    duplicates collapse.

    Returns
    -------
    ndarray of bool, shape (n_voters, d)
    """
    u = check_vector(u, "update")
    votes = check_positive_int(votes, "votes")
    n_voters = check_positive_int(n_voters, "n_voters")
    rng = check_random_state(rng)
    cdf = np.cumsum(np.abs(u))
    total = cdf[-1]
    if total <= 0.0:
        raise ValueError("cannot vote on an all-zero update vector")
    draws = rng.random((n_voters, votes)) * total
    # zero-weight indices own an empty CDF interval and are never hit
    picks = np.searchsorted(cdf, draws, side="right")
    np.minimum(picks, u.size - 1, out=picks)
    out = np.zeros((n_voters, u.size), dtype=bool)
    out[np.arange(n_voters)[:, None], picks] = True
    return out


def vote(u, votes, rng):
    """Vote for up to ``votes`` indices of ``u`` with odds proportional to magnitude.

    >>> bits = vote([1.0, 0.0, 0.0, 0.0], 10, rng=0)
    >>> bits.astype(int).tolist()
    [1, 0, 0, 0]
    """
    return vote_many(u, votes, 1, rng)[0]


def safe_vote(u, votes, rng):
    """Like :func:`vote`, but an all-zero ``u`` votes for nothing."""
    u = check_vector(u, "update")
    if not np.any(u):
        return np.zeros(u.size, dtype=bool)
    return vote(u, votes, rng)


@dataclass(frozen=True)
class SparseUpdate:
    """Integer values at ascending positions of a length-``size`` vector."""

    indices: np.ndarray
    values: np.ndarray
    size: int

    def __len__(self):
        return int(self.indices.size)

    def items(self):
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def to_dense(self):
        out = np.zeros(self.size, dtype=np.int64)
        out[self.indices] = self.values
        return out


def compress(u, gia, cfg, rng):
    """Scale, quantize and mask ``u`` by the global index array ``gia``.

    The output holds exactly the GIA's set positions, in ascending order,
    each value being ``quantize(cfg.scale * u_l)``. An all-zero GIA yields an
    empty update.
    """
    u = check_vector(u, "update")
    gia = check_mask(gia, u.size, "gia")
    if np.max(np.abs(u)) > cfg.max_abs * (1.0 + 1e-12):
        raise ValueError("update magnitude exceeds cfg.max_abs; rebuild the config")
    idx = np.flatnonzero(gia)
    vals = quantize(cfg.scale * u[idx], rng)
    return SparseUpdate(idx, vals, u.size)


def residual_update(u, compressed, cfg):
    """Update mass left behind by ``compressed``: ``u - dense(compressed) / scale``.

    Masked-out positions keep ``u`` exactly.
    """
    u = check_vector(u, "update")
    if compressed.size != u.size:
        raise ValueError("compressed update and u differ in length")
    residual = u.copy()
    idx = compressed.indices
    residual[idx] = u[idx] - compressed.values / cfg.scale
    return residual
