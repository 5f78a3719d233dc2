"""
Supervised fitting of a network to state-control pairs.

Gradients are back-propagated by hand over float batches; the loss is the
mean squared error in control space (after the fixed post transform), and
the held-out mean absolute error is reported per epoch.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..exceptions import ConvergenceError, ValidationError
from ..gcnet import Layer, make_network

log = logging.getLogger(__name__)


def _act(name, z):
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    """Derivative of the activation given its input ``z`` and output ``a``."""
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid, overflow-free
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def loss_and_grad(net, X, U):
    """Control-space MSE over a batch and its gradient w.r.t. every ``(W, b)``.

    Returns ``(loss, [(dW_0, db_0), ...])`` with one pair per layer.
    """
    h = (X - net.pre_shift) / net.pre_scale
    cache = []
    for L in net.layers:
        z = h @ L.W.T + L.b
        a = _act(L.activation, z)
        cache.append((h, z, a))
        h = a
    diff = h * net.post_scale + net.post_shift - U
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff * net.post_scale / diff.size
    grads = []
    for L, (h_in, z, a) in zip(reversed(net.layers), reversed(cache)):
        g = g * _act_grad(L.activation, z, a)
        grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ L.W
    return loss, grads[::-1]


def mean_absolute_error(net, X, U):
    return float(np.mean(np.abs(net(X) - U)))


@dataclass
class TrainResult:
    net: object
    metrics: list  # one dict per epoch

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.metrics[0]), lineterminator="\n")
            w.writeheader()
            for row in self.metrics:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train(net, X, U, *, epochs=50, batch_size=256, learning_rate=1e-3, lr_decay=1.0,
          val_fraction=0.1, seed=0, standardize=True, groups=None):
    """Fit ``net`` to ``(X, U)`` with Adam on minibatches.

    Parameters
    ----------
    net : NetSpec
        Initial network; its post transform is kept fixed.
    X, U : ndarray
        States ``(N, n_inputs)`` and target controls ``(N, n_outputs)``.
    lr_decay : float
        Learning-rate factor applied after every epoch.
    val_fraction : float
        Share of rows held out for the MAE report.
    standardize : bool
        Replace the pre transform with the training rows' mean and standard
        deviation (frozen during learning).
    groups : ndarray, optional
        Group label per row (trajectory index); the held-out split then
        keeps whole groups together.

    Returns
    -------
    TrainResult
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim != 2 or U.ndim != 2 or len(X) != len(U) or len(X) == 0:
        raise ValidationError("X and U must be non-empty 2-D arrays with matching rows")
    if X.shape[1] != net.n_inputs or U.shape[1] != net.n_outputs:
        raise ValidationError(
            f"data has {X.shape[1]} inputs / {U.shape[1]} outputs, network expects "
            f"{net.n_inputs} / {net.n_outputs}")
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if groups is None:
        groups = np.arange(len(X))
    labels = np.unique(groups)
    n_val = int(round(val_fraction * len(labels)))
    val_mask = np.isin(groups, rng.permutation(labels)[:n_val])
    if val_mask.all():
        raise ValidationError("validation split leaves no training rows")
    Xt, Ut, Xv, Uv = X[~val_mask], U[~val_mask], X[val_mask], U[val_mask]
    if not len(Xv):
        Xv, Uv = Xt, Ut

    if standardize:
        std = Xt.std(axis=0)
        net = replace(net, pre_shift=Xt.mean(axis=0), pre_scale=np.where(std > 0, std, 1.0))
    params = [[L.W.copy(), L.b.copy()] for L in net.layers]
    m = [[np.zeros_like(p) for p in pair] for pair in params]
    v = [[np.zeros_like(p) for p in pair] for pair in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    lr = learning_rate
    metrics = []

    def rebuild():
        return replace(net, layers=tuple(Layer(W, b, L.activation)
                                         for (W, b), L in zip(params, net.layers)))

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(Xt))
        total = 0.0
        for start in range(0, len(Xt), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grad(rebuild(), Xt[idx], Ut[idx])
            if not math.isfinite(loss):
                raise ConvergenceError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            step += 1
            c1, c2 = 1 - beta1**step, 1 - beta2**step
            for pair, mp, vp, gp in zip(params, m, v, grads):
                for j in range(2):
                    mp[j] = beta1 * mp[j] + (1 - beta1) * gp[j]
                    vp[j] = beta2 * vp[j] + (1 - beta2) * gp[j] ** 2
                    pair[j] -= lr * (mp[j] / c1) / (np.sqrt(vp[j] / c2) + eps)
        lr *= lr_decay
        current = rebuild()
        pred = current(Xv)
        row = {
            "epoch": epoch,
            "train_mse": total / len(Xt),
            "val_mse": float(np.mean((pred - Uv) ** 2)),
            "val_mae": float(np.mean(np.abs(pred - Uv))),
        }
        metrics.append(row)
        log.info("epoch %d: train mse %.3e, held-out mae %.3e", epoch, row["train_mse"],
                 row["val_mae"])
    return TrainResult(rebuild(), metrics)


class GCNetRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`train`.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths (softplus); the output layer is ``tanh``.
    epochs, batch_size, learning_rate, lr_decay, val_fraction : see :func:`train`
    random_state : int
        Seeds both the initial weights and the minibatch order.

    Attributes
    ----------
    net_ : NetSpec
    metrics_ : list of dict
    """

    def __init__(self, hidden=(32, 32, 32), epochs=50, batch_size=256, learning_rate=1e-3,
                 lr_decay=1.0, val_fraction=0.1, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if y.ndim == 1:
            y = y[:, None]
        init = make_network(tuple(self.hidden), X.shape[1], y.shape[1], seed=self.random_state)
        res = train(init, X, y, epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=self.learning_rate, lr_decay=self.lr_decay,
                    val_fraction=self.val_fraction, seed=self.random_state, groups=groups)
        self.net_ = res.net
        self.metrics_ = res.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.net_(X)
