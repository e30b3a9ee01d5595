"""Dense feed-forward network engine in plain numpy.

Covers exactly what the training recipes need: two hidden layer style
architectures with relu or sigmoid activations, a linear or sigmoid output
layer, mean squared error, mini-batch SGD or Adam, per-feature scalers, and
a versioned JSON serialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "sigmoid")
_OUTPUT_ACTIVATIONS = ("linear", "sigmoid")


class MlpFormatError(ValueError):
    """Model payload cannot be decoded."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]          # weights[k]: (dims[k], dims[k+1])
    biases: list[np.ndarray]
    activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for k, w in enumerate(self.weights):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]):
                raise ValueError(f"weight {k} shape {w.shape} mismatches dims")


@dataclass
class Scaler:
    """Per-feature affine map x -> (x - shift) / scale."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if np.any(self.scale <= 0):
            raise ValueError("scaler scale must be positive")

    @classmethod
    def fit(cls, data: np.ndarray) -> "Scaler":
        """Standardize to zero mean, unit variance; constant features get scale 1."""
        shift = data.mean(axis=0)
        scale = data.std(axis=0)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return cls(shift=shift, scale=scale)

    @classmethod
    def box(cls, lo: np.ndarray, hi: np.ndarray) -> "Scaler":
        """Map [lo, hi] onto [0, 1]; degenerate boxes collapse to zero."""
        width = hi - lo
        return cls(shift=np.asarray(lo, dtype=float),
                   scale=np.where(width < 1e-12, 1.0, width))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift) / self.scale

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.shift


@dataclass(frozen=True)
class TrainConfig:
    hidden_width: int = 64
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.0

    def __post_init__(self):
        if min(self.hidden_width, self.epochs + 1, self.batch_size) <= 0:
            raise ValueError("hyperparameters must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in [0, 0.5]")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for f in ("hidden_width", "epochs", "batch_size", "seed"):
            if f in mapping:
                kwargs[f] = int(mapping[f])
        for f in ("learning_rate", "beta1", "beta2", "eps", "validation_fraction"):
            if f in mapping:
                kwargs[f] = float(mapping[f])
        if "optimizer" in mapping:
            kwargs["optimizer"] = str(mapping["optimizer"])
        return cls(**kwargs)


def default_hidden_width(n_bus: int) -> int:
    return 64 if n_bus <= 40 else 128


def init_params(layer_dims: list[int], activation: str, output_activation: str,
                rng: np.random.Generator) -> MlpParams:
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        if activation == "relu":
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(layer_dims=list(layer_dims), weights=weights, biases=biases,
                     activation=activation, output_activation=output_activation)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(0.0, z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z   # linear


def _act_grad(name: str, out: np.ndarray) -> np.ndarray:
    # derivatives expressed through the activation output
    if name == "relu":
        return (out > 0).astype(float)
    if name == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single vector or a (N, d) batch."""
    single = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[1] != params.layer_dims[0]:
        raise ValueError(f"input dim {a.shape[1]}, expected {params.layer_dims[0]}")
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = _act(params.output_activation if k == last else params.activation, z)
    return a[0] if single else a


def _forward_cached(params: MlpParams, x: np.ndarray):
    acts = [x]
    last = len(params.weights) - 1
    a = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = _act(params.output_activation if k == last else params.activation, z)
        acts.append(a)
    return acts


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of the squared error summed across outputs."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = target - pred
    return float(np.sum(diff * diff) / pred.shape[0])


def backprop(params: MlpParams, x: np.ndarray, y: np.ndarray):
    """Loss and parameter gradients for a batch under the MSE loss."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    acts = _forward_cached(params, x)
    n = x.shape[0]
    loss = float(np.sum((y - acts[-1]) ** 2) / n)

    last = len(params.weights) - 1
    delta = (2.0 / n) * (acts[-1] - y) * _act_grad(params.output_activation, acts[-1])
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    for k in range(last, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * _act_grad(params.activation, acts[k])
    return loss, grads_w, grads_b


class _Adam:
    def __init__(self, params: MlpParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in params.weights]
        self.v_w = [np.zeros_like(w) for w in params.weights]
        self.m_b = [np.zeros_like(b) for b in params.biases]
        self.v_b = [np.zeros_like(b) for b in params.biases]

    def step(self, params, grads_w, grads_b):
        cfg = self.cfg
        self.t += 1
        corr1 = 1.0 - cfg.beta1 ** self.t
        corr2 = 1.0 - cfg.beta2 ** self.t
        for k in range(len(params.weights)):
            for value, grad, m, v in (
                (params.weights[k], grads_w[k], self.m_w[k], self.v_w[k]),
                (params.biases[k], grads_b[k], self.m_b[k], self.v_b[k]),
            ):
                m *= cfg.beta1
                m += (1 - cfg.beta1) * grad
                v *= cfg.beta2
                v += (1 - cfg.beta2) * grad * grad
                value -= cfg.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)


def train(x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          layer_dims: list[int] | None = None, activation: str = "relu",
          output_activation: str = "linear",
          x_scaler: Scaler | None = None, y_scaler: Scaler | None = None):
    """Fit an MLP on (x, y) with standardized features and targets.

    Returns (params, (x_scaler, y_scaler), history) where history holds the
    full-training-set loss (in scaled space) at each epoch end. Custom scalers
    allow box normalization for bounded outputs. Raises TrainingDivergedError
    if the loss goes non-finite.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y disagree on the sample count")
    if x.shape[0] < cfg.batch_size and cfg.epochs > 0:
        raise ValueError("need at least batch_size samples")

    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    n_val = int(cfg.validation_fraction * n)
    perm = rng.permutation(n)
    val_idx, fit_idx = perm[:n_val], perm[n_val:]

    x_scaler = x_scaler or Scaler.fit(x[fit_idx])
    y_scaler = y_scaler or Scaler.fit(y[fit_idx])
    xs = x_scaler.transform(x)
    ys = y_scaler.transform(y)

    if layer_dims is None:
        layer_dims = [x.shape[1], cfg.hidden_width, cfg.hidden_width, y.shape[1]]
    params = init_params(layer_dims, activation, output_activation, rng)
    adam = _Adam(params, cfg) if cfg.optimizer == "adam" else None

    history = []
    xf, yf = xs[fit_idx], ys[fit_idx]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(fit_idx))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            loss, gw, gb = backprop(params, xf[batch], yf[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            if adam is not None:
                adam.step(params, gw, gb)
            else:
                for k in range(len(params.weights)):
                    params.weights[k] -= cfg.learning_rate * gw[k]
                    params.biases[k] -= cfg.learning_rate * gb[k]
        epoch_loss = mse_loss(forward(params, xf), yf)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch)
        history.append(epoch_loss)

    if n_val:
        history_val = mse_loss(forward(params, xs[val_idx]), ys[val_idx])
    else:
        history_val = None
    return params, (x_scaler, y_scaler), {"train": history, "validation": history_val}


def predict(params: MlpParams, scalers: tuple[Scaler, Scaler],
            x: np.ndarray) -> np.ndarray:
    x_scaler, y_scaler = scalers
    return y_scaler.inverse(forward(params, x_scaler.transform(np.asarray(x, float))))


# ---------------------------------------------------------------------------
# Serialization: versioned JSON with exact float round trips
# ---------------------------------------------------------------------------

def to_payload(params: MlpParams, scalers: tuple[Scaler, Scaler]) -> dict:
    x_scaler, y_scaler = scalers
    return {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(params.layer_dims),
        "activation": params.activation,
        "output_activation": params.output_activation,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "x_scaler": {"shift": x_scaler.shift.tolist(), "scale": x_scaler.scale.tolist()},
        "y_scaler": {"shift": y_scaler.shift.tolist(), "scale": y_scaler.scale.tolist()},
    }


def from_payload(payload: dict) -> tuple[MlpParams, tuple[Scaler, Scaler]]:
    try:
        version = int(payload["format_version"])
        if version > FORMAT_VERSION:
            raise MlpFormatError(f"unsupported model format version {version}")
        params = MlpParams(
            layer_dims=[int(d) for d in payload["layer_dims"]],
            weights=[np.array(w, dtype=float) for w in payload["weights"]],
            biases=[np.array(b, dtype=float) for b in payload["biases"]],
            activation=payload["activation"],
            output_activation=payload["output_activation"],
        )
        scalers = tuple(
            Scaler(shift=np.array(payload[key]["shift"], dtype=float),
                   scale=np.array(payload[key]["scale"], dtype=float))
            for key in ("x_scaler", "y_scaler")
        )
    except MlpFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MlpFormatError(f"corrupt model payload: {exc}") from exc
    return params, scalers


def save(params: MlpParams, scalers: tuple[Scaler, Scaler]) -> bytes:
    return json.dumps(to_payload(params, scalers), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def load(blob: bytes) -> tuple[MlpParams, tuple[Scaler, Scaler]]:
    try:
        payload = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MlpFormatError(f"corrupt model payload: {exc}") from exc
    if not isinstance(payload, dict):
        raise MlpFormatError("corrupt model payload: expected an object")
    return from_payload(payload)
