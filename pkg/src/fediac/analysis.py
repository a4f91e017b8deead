"""Closed-form vote/upload probabilities, the compression error bound and
the bit-width bound that keeps it below one.

Ranks are 1-based throughout: rank ``l`` is the ``l``-th largest magnitude
of an update vector, modelled as ``phi * l**alpha`` with ``alpha < 0``.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_positive_int, check_probability
from .compression import QuantConfig, make_quant_config

ALPHA_CEILING = -1e-6


class InfeasibleSettingError(ValueError):
    """No candidate threshold/bit-width keeps the error bound in (0, 1)."""


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    phi: float

    def __post_init__(self):
        if not self.alpha < 0:
            raise ValueError(f"alpha must be negative, got {self.alpha}")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")

    def magnitudes(self, dim):
        return self.phi * np.arange(1, dim + 1, dtype=np.float64) ** self.alpha


@dataclass(frozen=True)
class BoundInputs:
    """Everything the error bound depends on.

    ``quant`` may be left as ``None`` when only the upload probabilities or
    the bit-width bound are needed.
    """

    dim: int
    votes: int
    n_clients: int
    threshold: int
    fit: PowerLawFit
    quant: QuantConfig | None = None

    def __post_init__(self):
        check_positive_int(self.dim, "dim")
        check_positive_int(self.votes, "votes")
        check_positive_int(self.n_clients, "n_clients")
        check_positive_int(self.threshold, "threshold")
        if self.threshold > self.n_clients:
            raise ValueError(
                f"threshold {self.threshold} exceeds n_clients {self.n_clients}"
            )


def fit_power_law(sorted_magnitudes):
    """Least-squares fit of ``log m_l = log phi + alpha * log l``.

    Non-positive entries are trimmed before fitting. The exponent is clamped
    to at most ``-1e-6`` so flat profiles still yield a valid fit.

    Parameters
    ----------
    sorted_magnitudes : array-like
        Magnitudes in descending order.
    """
    mags = np.asarray(sorted_magnitudes, dtype=np.float64).ravel()
    if not np.all(np.isfinite(mags)):
        raise ValueError("magnitudes must be finite")
    if np.any(np.diff(mags) > 0):
        raise ValueError("magnitudes must be sorted in descending order")
    mags = mags[mags > 0]
    if mags.size < 2:
        raise ValueError("need at least 2 positive magnitudes to fit a power law")
    log_rank = np.log(np.arange(1, mags.size + 1, dtype=np.float64))
    log_mag = np.log(mags)
    slope, intercept = np.polyfit(log_rank, log_mag, 1)
    return PowerLawFit(min(float(slope), ALPHA_CEILING), float(np.exp(intercept)))


def _rank_powers(alpha, dim, power=1.0):
    return np.arange(1, dim + 1, dtype=np.float64) ** (power * alpha)


def sample_probs(fit, dim):
    """Per-draw selection probability of every rank, ``l**alpha / sum l'**alpha``."""
    w = _rank_powers(fit.alpha, dim)
    return w / w.sum()


def sample_prob(rank, fit, dim):
    if not 1 <= rank <= dim:
        raise ValueError(f"rank must lie in [1, {dim}], got {rank}")
    return float(sample_probs(fit, dim)[rank - 1])


def vote_prob(p, votes):
    """Chance that at least one of ``votes`` draws hits an index of draw probability ``p``."""
    check_positive_int(votes, "votes")
    p = check_probability(p)
    # 1 - (1-p)^k without cancellation for tiny p
    safe = np.where(p >= 1.0, 0.0, p)
    out = np.where(p >= 1.0, 1.0, -np.expm1(votes * np.log1p(-safe)))
    return float(out) if out.ndim == 0 else out


def upload_prob(q, n_clients, threshold):
    """Upper binomial tail ``P[Bin(n_clients, q) >= threshold]``.

    Accumulated in log space so it stays finite for thousands of clients.
    """
    n = check_positive_int(n_clients, "n_clients")
    a = check_positive_int(threshold, "threshold")
    if a > n:
        raise ValueError(f"threshold {a} exceeds n_clients {n}")
    q = check_probability(q, "q")
    scalar = q.ndim == 0
    q = np.atleast_1d(q)
    j = np.arange(a, n + 1, dtype=np.float64)
    log_binom = gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
    inner = (q > 0) & (q < 1)
    out = np.where(q >= 1.0, 1.0, 0.0)
    if np.any(inner):
        qi = q[inner][:, None]
        terms = log_binom + j * np.log(qi) + (n - j) * np.log1p(-qi)
        out[inner] = np.exp(logsumexp(terms, axis=1))
    np.clip(out, 0.0, 1.0, out=out)
    return float(out[0]) if scalar else out


def upload_probs(inputs):
    """Upload probability of every rank for the given setting."""
    p = sample_probs(inputs.fit, inputs.dim)
    q = vote_prob(p, inputs.votes)
    return upload_prob(q, inputs.n_clients, inputs.threshold)


def expected_uploads(inputs):
    """Expected number of GIA positions set in a round."""
    return float(np.sum(upload_probs(inputs)))


def gamma(inputs):
    """Compression error bound: expected squared error relative to ``||scale*U||^2``.

    The first two terms are the mass dropped by masking; the last is the
    worst-case rounding variance of the uploaded positions. Convergence
    needs the result strictly inside (0, 1); checking that is up to the
    caller.
    """
    if inputs.quant is None:
        raise ValueError("gamma needs inputs.quant")
    r = upload_probs(inputs)
    w2 = _rank_powers(inputs.fit.alpha, inputs.dim, power=2.0)
    total = w2.sum()
    kept = np.dot(r, w2) / total
    rounding = r.sum() / (4.0 * inputs.quant.scale**2 * inputs.fit.phi**2 * total)
    return float(1.0 - kept + rounding)


def bits_threshold(inputs, max_abs):
    """Real-valued lower bound that the bit width must strictly exceed."""
    if max_abs <= 0:
        raise ValueError("max_abs must be positive")
    r = upload_probs(inputs)
    w2 = _rank_powers(inputs.fit.alpha, inputs.dim, power=2.0)
    ratio = math.sqrt(r.sum()) / (2.0 * inputs.fit.phi * math.sqrt(np.dot(r, w2)))
    n = inputs.n_clients
    return math.log2(ratio * n * max_abs + n) + 1.0


def min_bits(inputs, max_abs):
    """Smallest integer bit width strictly above :func:`bits_threshold`."""
    return int(math.floor(bits_threshold(inputs, max_abs))) + 1


@dataclass(frozen=True)
class TuneResult:
    threshold: int
    bits: int
    gamma: float
    expected_uploads: float
    within_budget: bool


def evaluate_thresholds(candidates, inputs, max_abs, max_bits=32, bits=None):
    """Score every candidate threshold with its minimal bit width.

    Returns a list of :class:`TuneResult` (``within_budget`` left False);
    candidates needing more than ``max_bits`` bits are skipped. A given
    ``bits`` replaces the minimal width for every candidate.
    """
    fixed = bits
    rows = []
    for a in candidates:
        trial = replace(inputs, threshold=int(a), quant=None)
        bits = min_bits(trial, max_abs) if fixed is None else int(fixed)
        if bits > max_bits:
            continue
        trial = replace(trial, quant=make_quant_config(bits, trial.n_clients, max_abs))
        rows.append(TuneResult(int(a), bits, gamma(trial), expected_uploads(trial), False))
    return rows


def tune_threshold(candidates, inputs, traffic_budget, max_abs, max_bits=32):
    """Pick the vote threshold with the smallest error bound under a traffic budget.

    Each candidate gets its minimal bit width. Among candidates with
    ``0 < gamma < 1`` and expected upload fraction at most
    ``traffic_budget``, the smallest ``gamma`` wins. If the budget rules
    everything out, the smallest-``gamma`` candidate is returned with
    ``within_budget=False``.

    Raises
    ------
    InfeasibleSettingError
        No candidate keeps ``gamma`` inside (0, 1).
    """
    if not candidates:
        raise ValueError("no candidate thresholds given")
    scored = evaluate_thresholds(candidates, inputs, max_abs, max_bits)
    feasible = [row for row in scored if 0.0 < row.gamma < 1.0]
    if not feasible:
        raise InfeasibleSettingError(
            f"no threshold in {list(candidates)} keeps the error bound in (0, 1) with "
            f"at most {max_bits} bits; allow more bits or try smaller thresholds"
        )
    budget = [row for row in feasible if row.expected_uploads / inputs.dim <= traffic_budget]
    if budget:
        best = min(budget, key=lambda row: (row.gamma, row.threshold))
        return replace(best, within_budget=True)
    return min(feasible, key=lambda row: (row.gamma, row.threshold))


def rank_profile(updates):
    """Rank-wise mean of the descending magnitude profiles of several update vectors."""
    mags = np.sort(np.abs(np.atleast_2d(updates)), axis=1)[:, ::-1]
    return mags.mean(axis=0)


def energy_head(profile, energy_frac):
    """Shortest prefix of a descending profile holding ``energy_frac`` of its squared mass."""
    profile = np.asarray(profile, dtype=np.float64)
    if not 0 < energy_frac <= 1:
        raise ValueError("energy_frac must lie in (0, 1]")
    cum = np.cumsum(profile**2)
    if cum[-1] == 0:
        return profile
    stop = int(np.searchsorted(cum, energy_frac * cum[-1])) + 1
    return profile[:max(2, min(stop, profile.size))]


def pool_fits(fits):
    """Combine per-client fits: mean exponent, geometric-mean scale."""
    fits = list(fits)
    if not fits:
        raise ValueError("no fits to pool")
    alpha = float(np.mean([f.alpha for f in fits]))
    phi = float(np.exp(np.mean([np.log(f.phi) for f in fits])))
    return PowerLawFit(min(alpha, ALPHA_CEILING), phi)


def stable_bits(n_clients):
    """Smallest width whose headroom exceeds twice the client count.

    Below it one rounding unit of the quantizer is at least half the largest
    magnitude, and the carried residual can outgrow the update.
    """
    return int(np.floor(np.log2(2 * n_clients))) + 2


class ThresholdTuner(BaseEstimator):
    """Bootstrap estimator that picks the vote threshold and bit width.

    ``fit`` takes one round of client updates (rows are clients), fits the
    power law to the head of the magnitude profile holding ``energy_frac``
    of the squared mass and runs :func:`tune_threshold`. The chosen width
    is raised to :func:`stable_bits` when below it.

    With ``pooling="profile"`` one fit is made to the rank-wise mean
    profile, which needs every update on the server. With
    ``pooling="clients"`` each row is fitted on its own and the fits are
    combined by :func:`pool_fits`, so clients only report two scalars.

    Attributes
    ----------
    fit_ : PowerLawFit
    threshold_, bits_ : int
    gamma_, expected_uploads_ : float
    """

    def __init__(self, vote_frac=0.05, candidates=(1, 2, 3, 4), traffic_budget=0.1,
                 max_bits=32, energy_frac=0.99, pooling="profile"):
        self.vote_frac = vote_frac
        self.pooling = pooling
        self.energy_frac = energy_frac
        self.candidates = candidates
        self.traffic_budget = traffic_budget
        self.max_bits = max_bits

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n_clients, dim = X.shape
        max_abs = float(np.max(np.abs(X)))
        if max_abs == 0.0:
            raise ValueError("all-zero updates; cannot fit a power law")
        if self.pooling == "profile":
            self.fit_ = fit_power_law(energy_head(rank_profile(X), self.energy_frac))
        elif self.pooling == "clients":
            self.fit_ = pool_fits(
                fit_power_law(energy_head(np.sort(np.abs(row))[::-1], self.energy_frac))
                for row in X if np.count_nonzero(row) >= 2)
        else:
            raise ValueError(f"pooling must be 'profile' or 'clients', got {self.pooling!r}")
        votes = max(1, int(round(self.vote_frac * dim)))
        candidates = [a for a in self.candidates if 1 <= a <= n_clients]
        inputs = BoundInputs(dim, votes, n_clients, min(candidates, default=1), self.fit_)
        result = tune_threshold(candidates, inputs, self.traffic_budget, max_abs,
                                self.max_bits)
        self.n_features_in_ = dim
        self.n_clients_ = n_clients
        self.votes_ = votes
        self.max_abs_ = max_abs
        self.threshold_ = result.threshold
        self.bits_ = min(max(result.bits, stable_bits(n_clients)), self.max_bits)
        if self.bits_ != result.bits:
            rescored = evaluate_thresholds([result.threshold], inputs, max_abs,
                                           self.max_bits, bits=self.bits_)[0]
            result = replace(rescored, within_budget=result.within_budget)
        self.gamma_ = result.gamma
        self.expected_uploads_ = result.expected_uploads
        self.within_budget_ = result.within_budget
        return self

    def bound_inputs(self):
        check_is_fitted(self, "threshold_")
        quant = make_quant_config(self.bits_, self.n_clients_, self.max_abs_)
        return BoundInputs(self.n_features_in_, self.votes_, self.n_clients_,
                           self.threshold_, self.fit_, quant)
