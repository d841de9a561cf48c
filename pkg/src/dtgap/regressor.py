"""
Inverse model: sensor readings -> asset configuration.

A one-hidden-layer perceptron written directly in numpy, trained by
mini-batch stochastic gradient descent with a fixed learning rate. Inputs and
targets are standardised with statistics frozen at pre-training; predictions
are de-standardised and clamped into the valid configuration ranges.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

CHECKPOINT_SCHEMA = "dtgap.regressor/1"

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"diverged: non-finite training loss at epoch {epoch}")


@dataclass(frozen=True)
class Hyperparams:
    hidden: int = 64
    learning_rate: float = 0.1
    batch_size: int = 8
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.hidden < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("hidden, batch_size and learning_rate must be positive")


@dataclass(frozen=True, eq=False)
class RegressionModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def with_params(self, params) -> "RegressionModel":
        w1, b1, w2, b2 = params
        return replace(self, w1=w1, b1=b1, w2=w2, b2=b2)


@dataclass
class TrainingRun:
    epochs: int
    learning_rate: float
    batch_size: int
    seed: int
    seconds: float = 0.0
    losses: list[float] = field(default_factory=list)


# --- standardisation -------------------------------------------------------


def _fit_scale(a: np.ndarray, pooled: bool = False) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    if pooled:
        std = np.full_like(std, np.sqrt(np.mean(std**2)))
    # Constant columns keep unit scale so standardisation stays invertible. A
    # column of one repeated float can show a rounding-level std; that counts
    # as constant too.
    std = np.where(std > 1e-12 * np.maximum(np.abs(mean), 1.0), std, 1.0)
    return mean, std


def standardize(a, mean, std):
    return (a - mean) / std


def destandardize(a, mean, std):
    return a * std + mean


# --- network ---------------------------------------------------------------


def _forward(params, xs, activation):
    w1, b1, w2, b2 = params
    act, _ = ACTIVATIONS[activation]
    h = act(xs @ w1 + b1)
    return h, h @ w2 + b2


def _loss_and_grads(params, xs, ys, activation):
    """Mean squared error over batch and outputs, with its gradient."""
    w1, b1, w2, b2 = params
    _, dact = ACTIVATIONS[activation]
    h, out = _forward(params, xs, activation)
    err = out - ys
    loss = float(np.mean(err * err))
    d_out = 2.0 * err / err.size
    g_w2 = h.T @ d_out
    g_b2 = d_out.sum(axis=0)
    d_z = (d_out @ w2.T) * dact(h)
    g_w1 = xs.T @ d_z
    g_b1 = d_z.sum(axis=0)
    return loss, (g_w1, g_b1, g_w2, g_b2)


def _init_params(n_in, n_hidden, n_out, rng):
    w1 = rng.standard_normal((n_in, n_hidden)) * np.sqrt(1.0 / n_in)
    w2 = rng.standard_normal((n_hidden, n_out)) * np.sqrt(1.0 / n_hidden)
    return [w1, np.zeros(n_hidden), w2, np.zeros(n_out)]


def _check_dataset(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training dataset")
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{len(X)} inputs but {len(Y)} labels")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data contains non-finite values")
    return X, Y


# Overflow on a diverging run is caught below as a non-finite loss.
@np.errstate(over="ignore", invalid="ignore")
def _sgd(params, xs, ys, epochs, hp: Hyperparams, rng, run: TrainingRun):
    n = len(xs)
    start = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, hp.batch_size):
            batch = order[lo : lo + hp.batch_size]
            loss, grads = _loss_and_grads(params, xs[batch], ys[batch], hp.activation)
            total += loss * len(batch)
            for p, g in zip(params, grads):
                p -= hp.learning_rate * g
        mean_loss = total / n
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(epoch + 1)
        run.losses.append(mean_loss)
    run.seconds = time.perf_counter() - start
    return params


def pretrain(X, Y, hyperparams: Hyperparams | None = None, seed: int = 0, epochs: int = 10,
             bounds: tuple | None = None) -> tuple[RegressionModel, TrainingRun]:
    """
    Fit standardisation on ``(X, Y)`` and train a fresh network.

    Parameters
    ----------
    X : array, shape (n, n_in)
        Sensor readings.
    Y : array, shape (n, n_out)
        Configuration vectors.
    bounds : (lower, upper), optional
        Clamping range for predictions; unbounded when omitted.

    Returns the model and its :class:`TrainingRun`. Wall-clock time covers
    the optimisation loop only.
    """
    hp = hyperparams or Hyperparams()
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X, Y = _check_dataset(X, Y)
    x_mean, x_std = _fit_scale(X, pooled=True)
    y_mean, y_std = _fit_scale(Y)
    rng = np.random.default_rng(seed)
    params = _init_params(X.shape[1], hp.hidden, Y.shape[1], rng)
    if bounds is None:
        bounds = (np.full(Y.shape[1], -np.inf), np.full(Y.shape[1], np.inf))
    run = TrainingRun(epochs, hp.learning_rate, hp.batch_size, seed)
    params = _sgd(params, standardize(X, x_mean, x_std), standardize(Y, y_mean, y_std),
                  epochs, hp, rng, run)
    model = RegressionModel(*params, x_mean, x_std, y_mean, y_std,
                            np.asarray(bounds[0], float), np.asarray(bounds[1], float), hp, seed)
    return model, run


def fine_tune(model: RegressionModel, X, Y, epochs: int, seed: int = 0,
              learning_rate: float | None = None,
              batch_size: int | None = None) -> tuple[RegressionModel, TrainingRun]:
    """Continue training from ``model``'s weights; standardisation is reused, not refit.

    ``learning_rate`` and ``batch_size`` override the pre-training values.
    """
    hp = model.hyperparams
    if learning_rate is not None:
        hp = replace(hp, learning_rate=learning_rate)
    if batch_size is not None:
        hp = replace(hp, batch_size=batch_size)
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    run = TrainingRun(epochs, hp.learning_rate, hp.batch_size, seed)
    if epochs == 0:
        return model, run
    X, Y = _check_dataset(X, Y)
    params = [p.copy() for p in model.params]
    rng = np.random.default_rng(seed)
    params = _sgd(params, standardize(X, model.x_mean, model.x_std),
                  standardize(Y, model.y_mean, model.y_std), epochs, hp, rng, run)
    return model.with_params(params), run


def predict_raw(model: RegressionModel, X) -> np.ndarray:
    """De-standardised network output, no clamping. Accepts (n_in,) or (n, n_in)."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("prediction input contains non-finite values")
    _, out = _forward(model.params, standardize(X, model.x_mean, model.x_std),
                      model.hyperparams.activation)
    return destandardize(out, model.y_mean, model.y_std)


def predict_array(model: RegressionModel, X) -> np.ndarray:
    """Prediction clamped into the model's configuration bounds."""
    return np.clip(predict_raw(model, X), model.lower, model.upper)


def loss(model: RegressionModel, X, Y) -> float:
    """Training objective (standardised MSE) on a dataset."""
    X, Y = _check_dataset(X, Y)
    xs = standardize(X, model.x_mean, model.x_std)
    ys = standardize(Y, model.y_mean, model.y_std)
    _, out = _forward(model.params, xs, model.hyperparams.activation)
    return float(np.mean((out - ys) ** 2))


def gradient_pairs(model: RegressionModel, x, y, step: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """
    Backprop and central-difference gradients of the loss on one example,
    flattened over every weight and bias.

    The example is standardised first, so ``step`` acts on the standardised
    scale.
    """
    xs = standardize(np.atleast_2d(np.asarray(x, float)), model.x_mean, model.x_std)
    ys = standardize(np.atleast_2d(np.asarray(y, float)), model.y_mean, model.y_std)
    act = model.hyperparams.activation
    params = [p.astype(float).copy() for p in model.params]
    _, analytic = _loss_and_grads(params, xs, ys, act)
    numeric = []
    for p in params:
        flat = p.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = _loss_and_grads(params, xs, ys, act)[0]
            flat[i] = saved - step
            down = _loss_and_grads(params, xs, ys, act)[0]
            flat[i] = saved
            numeric.append((up - down) / (2 * step))
    return np.concatenate([g.reshape(-1) for g in analytic]), np.array(numeric)


def gradient_check(model: RegressionModel, x, y, step: float = 1e-5) -> float:
    """
    Largest relative disagreement between backprop and central differences.

    Relative error per weight is ``|a - n| / max(|a| + |n|, 1e-7)``; the
    floor only matters for gradients that are essentially zero.
    """
    a, n = gradient_pairs(model, x, y, step)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)))


# --- checkpoints -----------------------------------------------------------


def _encode(a: np.ndarray):
    return {"shape": list(a.shape), "data": [float(v) if np.isfinite(v) else str(v) for v in a.reshape(-1)]}


def _decode(d) -> np.ndarray:
    return np.array([float(v) for v in d["data"]], dtype=float).reshape(d["shape"])


_ARRAYS = ("w1", "b1", "w2", "b2", "x_mean", "x_std", "y_mean", "y_std", "lower", "upper")


def save_checkpoint(model: RegressionModel, path: str | Path) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "hyperparams": asdict(model.hyperparams),
        "seed": model.seed,
        **{name: _encode(getattr(model, name)) for name in _ARRAYS},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> RegressionModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    arrays = {name: _decode(doc[name]) for name in _ARRAYS}
    return RegressionModel(**arrays, hyperparams=Hyperparams(**doc["hyperparams"]), seed=doc["seed"])
