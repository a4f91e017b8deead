"""Flat-parameter models with exact minibatch gradients."""

import numpy as np

from .._validation import check_random_state


class MLP:
    """Two-layer tanh network with a softmax cross-entropy loss.

    Parameters live in one flat vector laid out as ``W1, b1, W2, b2``.
    """

    def __init__(self, n_features, n_hidden, n_classes):
        self.n_features = n_features
        self.n_hidden = n_hidden
        self.n_classes = n_classes
        self._shapes = [(n_features, n_hidden), (n_hidden,), (n_hidden, n_classes), (n_classes,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]

    @property
    def n_params(self):
        return sum(self._sizes)

    def init(self, rng):
        rng = check_random_state(rng)
        w1 = rng.normal(0, 1 / np.sqrt(self.n_features), self._shapes[0])
        w2 = rng.normal(0, 1 / np.sqrt(self.n_hidden), self._shapes[2])
        return np.concatenate([w1.ravel(), np.zeros(self.n_hidden), w2.ravel(),
                               np.zeros(self.n_classes)])

    def unpack(self, w):
        parts, start = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            parts.append(w[start:start + size].reshape(shape))
            start += size
        return parts

    def logits(self, w, X):
        w1, b1, w2, b2 = self.unpack(w)
        return np.tanh(X @ w1 + b1) @ w2 + b2

    def predict_proba(self, w, X):
        z = self.logits(w, X)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, w, X, y):
        z = self.logits(w, X)
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(y)), y].mean())

    def loss_grad(self, w, X, y):
        w1, b1, w2, b2 = self.unpack(w)
        h = np.tanh(X @ w1 + b1)
        z = h @ w2 + b2
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        total = e.sum(axis=1, keepdims=True)
        n = len(y)
        loss = float((np.log(total[:, 0]) - z[np.arange(n), y]).mean())
        dz = e / total
        dz[np.arange(n), y] -= 1.0
        dz /= n
        gw2 = h.T @ dz
        gb2 = dz.sum(axis=0)
        dh = (dz @ w2.T) * (1.0 - h * h)
        gw1 = X.T @ dh
        gb1 = dh.sum(axis=0)
        return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


class Quadratic:
    """``0.5 * ||w - target||^2``; data arguments are ignored."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    @property
    def n_params(self):
        return self.target.size

    def loss(self, w, X=None, y=None):
        return 0.5 * float(np.sum((w - self.target) ** 2))

    def loss_grad(self, w, X=None, y=None):
        diff = w - self.target
        return 0.5 * float(diff @ diff), diff


class DivergenceError(FloatingPointError):
    pass


def local_train(model, w, X, y, lr, local_steps, batch_size, rng):
    """Run ``local_steps`` minibatch SGD steps from ``w``.

    Returns ``(update, mean_loss)`` where ``update = w_start - w_end``.
    """
    if local_steps < 1:
        raise ValueError("local_steps must be at least 1")
    rng = check_random_state(rng)
    w_local = np.array(w, dtype=np.float64, copy=True)
    n = 0 if X is None else len(X)
    losses = []
    for _ in range(local_steps):
        if n and batch_size < n:
            batch = rng.choice(n, batch_size, replace=False)
            loss, grad = model.loss_grad(w_local, X[batch], y[batch])
        else:
            loss, grad = model.loss_grad(w_local, X, y)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss {loss} during local training (lr={lr})")
        w_local -= lr * grad
        losses.append(loss)
    return w - w_local, float(np.mean(losses))


def learning_rate(t, lr0=0.1, decay=40.0):
    """Rate for global iteration ``t`` (1-based): ``lr0 / (1 + sqrt(t) / decay)``."""
    return lr0 / (1.0 + np.sqrt(t) / decay)
