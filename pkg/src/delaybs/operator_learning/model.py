"""Trained operator model: training loop, inference, persistence."""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import CorruptFile, Divergence, FormatVersionMismatch, ShapeMismatch
from .dataset import to_channels
from .network import Adam, ModelConfig, Network, init_params, smooth_l1

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class DeepONetModel:
    config: ModelConfig
    params: dict
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        self.net = Network(self.config)

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def normalize(self, X):
        return (X - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def prepare(self, X):
        """Network input and per-record output scale for a raw batch."""
        Xs, a = amplitude_scale(X, self.config.amplitude_scaling)
        return self.normalize(Xs), a

    def forward(self, X):
        """Raw-channel batch ``(B, 3, m, m)`` -> predictions ``(B,)``."""
        Xn, a = self.prepare(X)
        y, _ = self.net.forward(self.params, Xn)
        return a * y

    def copy(self):
        return DeepONetModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.mean.copy(),
            self.std.copy(),
            list(self.loss_curve),
        )


def amplitude_scale(X, enabled=True):
    """Divide the state channels of each record by ``max(|x|, |u|)``.

    The operator is linear in ``(x, u)``; predicting ``a * N(X / a)`` makes
    the model exactly positively homogeneous in the state, so it keeps its
    gain on states far larger or smaller than the training records.
    Returns ``(X_scaled, a)``; records with a zero state get ``a = 0``.
    """
    if not enabled:
        return X, np.ones(X.shape[0])
    a = np.max(np.abs(X[:, 1:]), axis=(1, 2, 3))
    safe = np.where(a > 0, a, 1.0)
    Xs = X.copy()
    Xs[:, 1:] /= safe[:, None, None, None]
    return Xs, a


def channel_stats(X):
    mean = X.mean(axis=(0, 2, 3))
    std = X.std(axis=(0, 2, 3))
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def _grads(net, P, X, a, y, beta, workers):
    """Loss and summed gradients, chunked over ``workers`` in a fixed order."""
    if workers <= 1 or X.shape[0] < 2 * workers:
        out, cache = net.forward(P, X)
        loss, g = smooth_l1(a * out, y, beta)
        return loss, net.backward(P, cache, a * g)
    B = X.shape[0]
    bounds = np.linspace(0, B, workers + 1).astype(int)

    def part(i):
        sl = slice(bounds[i], bounds[i + 1])
        out, cache = net.forward(P, X[sl])
        d = a[sl] * out - y[sl]
        ad = np.abs(d)
        quad = ad < beta
        lsum = float(np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).sum())
        g = np.where(quad, d / beta, np.sign(d)) / B
        return lsum, net.backward(P, cache, a[sl] * g)

    with ThreadPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(part, range(workers)))
    loss = sum(p[0] for p in parts) / B
    grads = {k: sum(p[1][k] for p in parts) for k in parts[0][1]}
    return loss, grads


def train(dataset, config, workers=1, callback=None, X=None):
    """Fit a model to ``dataset`` by minibatch Adam on the smooth-L1 loss.

    The loss curve holds the mean per-record loss of each epoch in the
    training units (``config.loss_units``); with ``"normalized"`` each record
    is weighted by ``1 / max(|x|, |u|)`` so every state shape counts equally
    regardless of its amplitude.  Raises :class:`Divergence` carrying the last finite model when
    the loss turns non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if X is None:
        X = dataset.tensor(config.m)
    if X.shape[1:] != (3, config.m, config.m):
        raise ShapeMismatch(f"inputs {X.shape[1:]} do not match m={config.m}")
    y = np.asarray(dataset.U, dtype=float)
    Xs, amp = amplitude_scale(X, config.amplitude_scaling)
    mean, std = channel_stats(Xs)
    model = DeepONetModel(config, init_params(config), mean, std)
    Xn = model.normalize(Xs)
    del Xs
    if config.loss_units == "normalized":
        y = y / np.where(amp > 0, amp, 1.0)
        amp = np.ones_like(amp)
    net = model.net
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    B = len(y)
    last_good = model.copy()
    for epoch in range(config.epochs):
        perm = rng.permutation(B)
        total = 0.0
        for b0 in range(0, B, config.batch_size):
            idx = perm[b0 : b0 + config.batch_size]
            loss, grads = _grads(net, model.params, Xn[idx], amp[idx], y[idx], config.beta, workers)
            if not math.isfinite(loss):
                raise Divergence(f"non-finite loss in epoch {epoch}", checkpoint=last_good)
            opt.update(model.params, grads)
            total += loss * idx.size
        epoch_loss = total / B
        if not math.isfinite(epoch_loss):
            raise Divergence(f"non-finite loss in epoch {epoch}", checkpoint=last_good)
        model.loss_curve.append(epoch_loss)
        last_good = model.copy()
        opt.lr *= config.lr_decay
        if callback is not None:
            callback(epoch, epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
    return model


def best_so_far(curve):
    return np.minimum.accumulate(np.asarray(curve, dtype=float))


def predict(model, tau, x, u):
    """Scalar control from a single state at any resolution.

    ``tau`` and ``x`` have ``n`` samples, ``u`` has shape ``(n, nr)``; all
    are linearly resampled to the model grid.
    """
    tau = np.asarray(tau, dtype=float)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if tau.ndim != 1 or x.ndim != 1 or u.ndim != 2 or tau.shape != x.shape or u.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"bad input shapes tau{tau.shape}, x{x.shape}, u{u.shape}")
    if x.size < 2 or u.shape[1] < 2:
        raise ShapeMismatch("need at least two samples per axis")
    X = to_channels(tau[None], x[None], u[None], model.config.m)
    return float(model.forward(X)[0])


def evaluate(model, dataset, X=None):
    """Error statistics of the model on ``dataset`` (labels in their own units)."""
    if X is None:
        X = dataset.tensor(model.config.m)
    pred = model.forward(X)
    err = np.abs(pred - dataset.U)
    rel = err / np.maximum(np.abs(dataset.U), 1e-12)
    loss, _ = smooth_l1(pred, dataset.U, model.config.beta)
    return {
        "records": int(len(dataset)),
        "max_abs_error": float(err.max()),
        "mean_abs_error": float(err.mean()),
        "median_rel_error": float(np.median(rel)),
        "smooth_l1": loss,
    }


class NeuralController:
    """Controller callback ``(tau_samples, x, u) -> U`` around a trained model."""

    name = "neural"

    def __init__(self, model):
        self.model = model
        self.calls = 0
        self.seconds = 0.0

    def __call__(self, tau_samples, x, u):
        t0 = time.perf_counter()
        out = predict(self.model, tau_samples, x, u)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        return out


# persistence -----------------------------------------------------------------


def _encode(a):
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def save_model(model, path):
    """Write a JSON model file; decimal floats in shortest round-trip form."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "delaybs-deeponet",
        "config": model.config.to_dict(),
        "normalization": {"mean": _encode(model.mean), "std": _encode(model.std)},
        "params": {k: _encode(v) for k, v in sorted(model.params.items())},
        "loss_curve": [float(v) for v in model.loss_curve],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptFile(f"{path}: {e}") from e
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptFile(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format {doc['format_version']} != {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        params = {k: _decode(v) for k, v in doc["params"].items()}
        mean = _decode(doc["normalization"]["mean"])
        std = _decode(doc["normalization"]["std"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFile(f"{path}: {e}") from e
    expected = init_params(config, np.random.default_rng(0))
    if set(expected) != set(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CorruptFile(f"{path}: parameter arrays do not match the config")
    return DeepONetModel(config, params, mean, std, list(doc.get("loss_curve", [])))
