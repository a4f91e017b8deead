"""Federated training loop and its scikit-learn estimator front end."""

import hashlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .._validation import check_random_state
from ..netsim import SERVICE_MODELS, NetworkSimulator, RatePlan, synthetic_rates
from ..switch import FloatAggregator, SwitchState
from .data import client_shards, dirichlet_partition
from .model import MLP, learning_rate, local_train
from .rounds import (
    FIT_REPORT_BYTES,
    SETTING_BYTES,
    Algorithm,
    Network,
    bootstrap_first_round,
    make_tuner,
    run_baseline_round,
    run_dense_round,
    run_fediac_round,
)

DEFAULT_THRESHOLD = 3
DEFAULT_BITS = 12

METRIC_COLUMNS = (
    "seed",
    "iteration",
    "wall_clock_s",
    "train_loss",
    "test_accuracy",
    "upload_bytes",
    "download_bytes",
    "agg_count",
    "gia_density",
)


@dataclass
class MetricsRow:
    seed: int
    iteration: int
    wall_clock_s: float
    train_loss: float
    test_accuracy: float
    upload_bytes: int
    download_bytes: int
    agg_count: int
    gia_density: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


def model_checksum(w):
    return hashlib.sha256(np.ascontiguousarray(w, dtype=np.float64).tobytes()).hexdigest()


class Federation:
    """State of an in-progress federated run.

    Each client keeps its own copy of the global model; all copies apply
    the same broadcast delta and are checked for bit-identity every round.
    """

    def __init__(self, model, shards, algorithm, plan, *, seed=0, local_steps=5,
                 batch_size=32, lr0=0.1, lr_decay=40.0, vote_frac=0.05, threshold=None,
                 bits=None, candidates=(1, 2, 3, 4), traffic_budget=0.1, max_bits=32,
                 switchml_bits=12, topk_frac=0.05, memory_budget=1 << 20,
                 fixed_max_abs=False, bootstrap="client", w0=None):
        if bootstrap not in ("client", "server"):
            raise ValueError(f"bootstrap must be 'client' or 'server', got {bootstrap!r}")
        self.model = model
        self.bootstrap_mode = bootstrap
        self.shards = shards
        self.algorithm = Algorithm(algorithm)
        self.plan = plan
        self.n_clients = len(shards)
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.lr0, self.lr_decay = lr0, lr_decay
        self.vote_frac = vote_frac
        self.candidates = candidates
        self.traffic_budget = traffic_budget
        self.max_bits = max_bits
        self.switchml_bits = switchml_bits
        self.topk_frac = topk_frac
        self.fixed_max_abs = fixed_max_abs

        streams = np.random.SeedSequence(seed).spawn(self.n_clients + 3)
        init_rng = np.random.default_rng(streams[0])
        self.codec_rng = np.random.default_rng(streams[1])
        self.client_rngs = [np.random.default_rng(s) for s in streams[3:]]
        w = model.init(init_rng) if w0 is None else np.array(w0, dtype=np.float64)
        self.client_w = [w.copy() for _ in range(self.n_clients)]
        self.residuals = np.zeros((self.n_clients, w.size))

        self.threshold = threshold
        self.bits = bits
        self.bootstrap = None
        self.switch = SwitchState(self.n_clients, memory_budget,
                                  threshold if threshold is not None else 1)
        self.server = FloatAggregator(self.n_clients)
        self.sim = NetworkSimulator(plan, np.random.default_rng(streams[2]))
        self._run_max_abs = None
        self.t = 0
        self.clock = 0.0
        self.upload_bytes = 0
        self.download_bytes = 0
        self.last = None

    @property
    def w(self):
        return self.client_w[0]

    @property
    def dim(self):
        return self.w.size

    @property
    def agg_count(self):
        return self.switch.agg_count + self.server.agg_count

    @property
    def needs_bootstrap(self):
        return self.algorithm is Algorithm.FEDIAC and (self.threshold is None or self.bits is None)

    def _local_updates(self, lr):
        updates = np.empty((self.n_clients, self.dim))
        losses = np.empty(self.n_clients)
        for i, shard in enumerate(self.shards):
            updates[i], losses[i] = local_train(self.model, self.client_w[i], shard.X, shard.y,
                                                lr, self.local_steps, self.batch_size,
                                                self.client_rngs[i])
        return updates, float(losses.mean())

    def step(self):
        """Run one global iteration and return its :class:`RoundResult`."""
        self.t += 1
        lr = learning_rate(self.t, self.lr0, self.lr_decay)
        local, _ = self._local_updates(lr)
        net = Network(self.sim, self.switch, self.server, self.sim.train(self.clock))

        extra_up = extra_down = 0
        dense_bootstrap = False
        if self.t == 1 and self.needs_bootstrap:
            self._bootstrap(local)
            if self.bootstrap_mode == "server":
                dense_bootstrap = True
            else:
                extra_up = FIT_REPORT_BYTES * self.n_clients
                extra_down = SETTING_BYTES * self.n_clients

        if dense_bootstrap:
            result = run_dense_round(local, net, self.t)
        elif self.algorithm is Algorithm.FEDIAC:
            updates = local + self.residuals
            result = run_fediac_round(updates, net, self.t, self._votes(), self.bits,
                                      self.codec_rng, self._fixed_max_abs(updates))
        elif self.algorithm is Algorithm.DENSE:
            result = run_dense_round(local, net, self.t)
        else:
            updates = local + self.residuals if self.algorithm is Algorithm.TOPK_BLOCK else local
            result = run_baseline_round(self.algorithm, updates, net, self.t, self.codec_rng,
                                        bits=self.switchml_bits, topk_frac=self.topk_frac,
                                        fixed_max_abs=self._fixed_max_abs(updates))

        if result.residuals is not None:
            self.residuals = result.residuals
        for w in self.client_w:
            w -= result.delta
        reference = model_checksum(self.client_w[0])
        if any(model_checksum(w) != reference for w in self.client_w[1:]):
            raise AssertionError("client models diverged from each other")
        self.clock = result.end_time
        self.upload_bytes += result.upload_bytes + extra_up
        self.download_bytes += result.download_bytes + extra_down
        self.last = result
        return result

    def _votes(self):
        return max(1, int(round(self.vote_frac * self.dim)))

    def _fixed_max_abs(self, updates):
        if not self.fixed_max_abs:
            return None
        if self._run_max_abs is None:
            self._run_max_abs = float(np.max(np.abs(updates))) or None
        return self._run_max_abs

    def _bootstrap(self, updates):
        candidates = self.candidates if self.threshold is None else (self.threshold,)
        pooling = "profile" if self.bootstrap_mode == "server" else "clients"
        tuner = make_tuner(self.vote_frac, candidates, self.traffic_budget, self.max_bits,
                           pooling=pooling)
        outcome = bootstrap_first_round(updates, tuner,
                                        self.threshold or DEFAULT_THRESHOLD,
                                        self.bits or DEFAULT_BITS)
        self.bootstrap = outcome
        if self.threshold is None:
            self.threshold = min(outcome.threshold, self.n_clients)
        if self.bits is None:
            self.bits = outcome.bits
        self.switch.threshold = self.threshold


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by simulated in-network federated learning.

    ``fit`` partitions the training data across ``n_clients`` clients with
    Dirichlet(``beta``) label skew and runs global iterations of the chosen
    aggregation algorithm until ``rounds`` iterations or ``time_budget``
    simulated seconds, whichever comes first.

    Parameters
    ----------
    algorithm : {"fediac", "switchml", "topk_block", "dense"}
    threshold, bits : int or None
        FediAC vote threshold and bit width. Either left as None is tuned
        from the first iteration's updates.
    bootstrap : {"client", "server"}
        How that tuning sees the updates. ``"client"`` has each client fit
        its own magnitude profile and report two scalars; ``"server"``
        uploads the first iteration densely and fits on the server.
    vote_frac : float
        FediAC votes per client as a fraction of the model size.
    switch : {"high", "low"}
        Switch service-time profile.
    upload_rates : array-like or None
        Packets per second per client; drawn uniformly from [200, 2800]
        when None.

    Attributes
    ----------
    classes_ : ndarray
    weights_ : ndarray
        Final flat model parameters.
    history_ : list of MetricsRow
        One row per global iteration; accuracy is measured on ``eval_set``
        when given, otherwise on the training data.
    federation_ : Federation
    threshold_, bits_ : int or None
        Vote threshold and bit width in use after fitting; None for the
        baselines.
    """

    def __init__(self, algorithm="fediac", n_clients=20, beta=0.5, rounds=100,
                 time_budget=None, n_hidden=256, local_steps=5, batch_size=32, lr0=0.1,
                 lr_decay=40.0, vote_frac=0.05, threshold=None, bits=None,
                 candidates=(1, 2, 3, 4), traffic_budget=0.1, max_bits=32, switchml_bits=12,
                 topk_frac=0.05, switch="high", memory_budget=1 << 20, upload_rates=None,
                 train_delay=2.0, download_multiplier=5.0, fixed_max_abs=False,
                 bootstrap="client", random_state=None):
        self.algorithm = algorithm
        self.n_clients = n_clients
        self.beta = beta
        self.rounds = rounds
        self.time_budget = time_budget
        self.n_hidden = n_hidden
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.vote_frac = vote_frac
        self.threshold = threshold
        self.bits = bits
        self.candidates = candidates
        self.traffic_budget = traffic_budget
        self.max_bits = max_bits
        self.switchml_bits = switchml_bits
        self.topk_frac = topk_frac
        self.switch = switch
        self.memory_budget = memory_budget
        self.upload_rates = upload_rates
        self.train_delay = train_delay
        self.download_multiplier = download_multiplier
        self.fixed_max_abs = fixed_max_abs
        self.bootstrap = bootstrap
        self.random_state = random_state

    def _seed(self):
        if self.random_state is None or isinstance(self.random_state, (int, np.integer)):
            return self.random_state
        return int(check_random_state(self.random_state).integers(2**31))

    def fit(self, X, y, eval_set=None, callback=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        y_enc = self._encoder.transform(y)
        if eval_set is not None:
            X_eval = check_array(eval_set[0], dtype=np.float64)
            y_eval = self._encoder.transform(eval_set[1])
        else:
            X_eval, y_eval = X, y_enc
        if self.switch not in SERVICE_MODELS:
            raise ValueError(f"switch must be one of {sorted(SERVICE_MODELS)}")

        seed = self._seed()
        root = np.random.SeedSequence(seed)
        part_seq, rate_seq, fed_seq = root.spawn(3)
        n_classes = len(self.classes_)
        partition = dirichlet_partition(y_enc, self.n_clients, self.beta,
                                        np.random.default_rng(part_seq))
        shards = client_shards(X, y_enc, partition, n_classes)
        rates = (synthetic_rates(self.n_clients, np.random.default_rng(rate_seq))
                 if self.upload_rates is None
                 else np.resize(np.asarray(self.upload_rates, dtype=np.float64), self.n_clients))
        plan = RatePlan.build(rates, self.switch, self.train_delay, self.download_multiplier)
        model = MLP(X.shape[1], self.n_hidden, n_classes)
        fed_seed = int(fed_seq.generate_state(1)[0])
        fed = Federation(
            model, shards, self.algorithm, plan, seed=fed_seed,
            local_steps=self.local_steps, batch_size=self.batch_size, lr0=self.lr0,
            lr_decay=self.lr_decay, vote_frac=self.vote_frac, threshold=self.threshold,
            bits=self.bits, candidates=self.candidates, traffic_budget=self.traffic_budget,
            max_bits=self.max_bits,
            switchml_bits=self.switchml_bits, topk_frac=self.topk_frac,
            memory_budget=self.memory_budget, fixed_max_abs=self.fixed_max_abs,
            bootstrap=self.bootstrap,
        )
        self.federation_ = fed
        self.n_features_in_ = X.shape[1]
        self.history_ = []
        row_seed = -1 if seed is None else int(seed)
        while fed.t < self.rounds:
            if self.time_budget is not None and fed.clock >= self.time_budget:
                break
            result = fed.step()
            row = MetricsRow(
                seed=row_seed,
                iteration=fed.t,
                wall_clock_s=fed.clock,
                train_loss=model.loss(fed.w, X, y_enc),
                test_accuracy=float(np.mean(
                    model.predict_proba(fed.w, X_eval).argmax(axis=1) == y_eval)),
                upload_bytes=fed.upload_bytes,
                download_bytes=fed.download_bytes,
                agg_count=fed.agg_count,
                gia_density=result.gia_density,
            )
            self.history_.append(row)
            if callback is not None:
                callback(row)
        self.weights_ = fed.w.copy()
        fediac = fed.algorithm is Algorithm.FEDIAC
        self.threshold_ = fed.threshold if fediac else None
        self.bits_ = fed.bits if fediac else None
        self._model = model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return self._model.predict_proba(self.weights_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
