"""Confidence estimators and their NLL fitting procedures.

Three calibrators share one interface (``temperatures``, ``log_probs``,
``probs``):

* :class:`Identity` -- plain softmax of the logits.
* :class:`Temperature` -- softmax of ``logits / tau`` with one global ``tau``.
* :class:`Caring` -- a two-layer network regressing a per-sample temperature
  ``T(z) = 1 + relu(W2 relu(W1 z + b1) + b2)`` from a feature vector ``z``.

Every calibrator divides a whole logit row by one positive scalar, so the
ranking of classes inside a row (and hence accuracy) never changes.

Gradients
---------
For one sample with logits ``y``, true class ``a`` and temperature ``T``::

    loss = -y_a / T + logsumexp(y / T)
    dloss/dT = sum_j p_j (y_a - y_j) / T**2,   p = softmax(y / T)

The temperature fit averages this over samples. The network fit chains it
through ``T = 1 + relu(o)``, ``o = W2 h + b2``, ``h = relu(W1 z + b1)``, with
relu'(0) taken as 0. Weight decay adds ``wd * W`` to the weight-matrix
gradients only (biases are not decayed); the matching loss term is
``wd / 2 * (|W1|^2 + |W2|^2)``.

``tau`` is optimised directly with projection onto ``[1e-3, inf)``.
Optimising ``log tau`` instead would remove the projection but is not what
plain gradient descent on ``tau`` does.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from calibkit.dataset import DataError, SampleSet
from calibkit.metrics import ece, predict, reliability_bins
from calibkit.numerics import Prng, log_softmax, softmax

TAU_FLOOR = 1e-3


class NumericError(ArithmeticError):
    """Raised when a fit produces a non-finite loss or parameter."""


class ModelFormatError(DataError):
    """Raised for unreadable or inconsistent model files."""


def _scaled_log_probs(logits: np.ndarray, temps: np.ndarray) -> np.ndarray:
    return log_softmax(logits / temps[:, None])


class _Calibrator:
    requires_features = False

    def temperatures(self, logits, features=None) -> np.ndarray:
        raise NotImplementedError

    def log_probs(self, logits, features=None) -> np.ndarray:
        logits = np.asarray(logits, dtype=np.float64)
        return _scaled_log_probs(logits, self.temperatures(logits, features))

    def probs(self, logits, features=None) -> np.ndarray:
        return np.exp(self.log_probs(logits, features))


@dataclass(frozen=True)
class Identity(_Calibrator):
    kind = "identity"

    def temperatures(self, logits, features=None) -> np.ndarray:
        return np.ones(len(logits))


@dataclass(frozen=True)
class Temperature(_Calibrator):
    tau: float
    kind = "temperature"

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= TAU_FLOOR):
            raise ValueError(f"temperature must be finite and >= {TAU_FLOOR}, got {self.tau}")

    def temperatures(self, logits, features=None) -> np.ndarray:
        return np.full(len(logits), float(self.tau))


@dataclass(frozen=True)
class Caring(_Calibrator):
    """Input-conditioned temperature network.

    Attributes:
        w1: ``(hidden, input_dim)`` first-layer weights.
        b1: ``(hidden,)`` first-layer bias.
        w2: ``(1, hidden)`` output weights.
        b2: output bias.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    kind = "caring"
    requires_features = True

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64).reshape(1, -1)
        if w1.ndim != 2 or w1.shape[0] < 1:
            raise ValueError(f"w1 must be (hidden, input_dim), got {w1.shape}")
        h = w1.shape[0]
        if b1.shape != (h,) or w2.shape != (1, h):
            raise ValueError(f"inconsistent shapes: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", np.float64(self.b2))):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in {name}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def _forward(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise DataError(f"feature shape {features.shape} does not match input_dim {self.input_dim}")
        pre = features @ self.w1.T + self.b1
        hid = np.maximum(pre, 0.0)
        out = hid @ self.w2[0] + self.b2
        return pre, hid, out

    def temperatures(self, logits, features=None) -> np.ndarray:
        if features is None:
            raise DataError("features required by the CARING calibrator")
        if len(features) != len(logits):
            raise DataError(f"row-count mismatch: {len(logits)} logit rows vs {len(features)} feature rows")
        return 1.0 + np.maximum(self._forward(features)[2], 0.0)


Calibrator = Union[Identity, Temperature, Caring]


def confidences_identity(logits) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64))


def confidences_temperature(logits, tau: float) -> np.ndarray:
    return Temperature(tau).probs(logits)


def caring_temperature(z, model: Caring) -> float:
    """Temperature the network assigns to a single feature vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != model.input_dim:
        raise DataError(f"feature vector of length {z.shape} does not match input_dim {model.input_dim}")
    return float(1.0 + max(model._forward(z[None, :])[2][0], 0.0))


def confidences_caring(logits, features, model: Caring) -> np.ndarray:
    return model.probs(logits, features)


@dataclass(frozen=True)
class FitConfig:
    lr: float = 0.01
    epochs: int = 50
    weight_decay: float = 0.0
    hidden: int = 64
    seed: int = 0
    batch_size: int = 0  # 0 means full batch

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.batch_size < 0:
            raise ValueError(f"batch_size must be >= 0, got {self.batch_size}")


TEMPERATURE_DEFAULTS = FitConfig(lr=0.01, epochs=50)
CARING_DEFAULTS = FitConfig(lr=5e-3, epochs=300, weight_decay=1e-6, hidden=64)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_nll: float
    val_ece: Optional[float]
    mean_T: float
    std_T: float


@dataclass
class TrainingTrace:
    """Per-epoch state of a fit, recorded after that epoch's updates."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        values = [record.train_nll, record.mean_T, record.std_T]
        if record.val_ece is not None:
            values.append(record.val_ece)
        if not all(math.isfinite(v) for v in values):
            raise NumericError(f"non-finite training statistic at epoch {record.epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def to_csv(self) -> str:
        lines = ["epoch,train_nll,mean_T,std_T,val_ece"]
        for r in self.records:
            val_ece = "" if r.val_ece is None else repr(r.val_ece)
            lines.append(f"{r.epoch},{r.train_nll!r},{r.mean_T!r},{r.std_T!r},{val_ece}")
        return "\n".join(lines) + "\n"


def _ece_from_log_probs(log_probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> float:
    pred, conf = predict(np.exp(log_probs))
    return ece(reliability_bins(conf, pred == labels, n_bins), len(labels))


def _nll_and_dT(logits: np.ndarray, labels: np.ndarray, temps: np.ndarray):
    """Per-sample NLL and its derivative in that sample's temperature."""
    idx = np.arange(len(labels))
    logp = _scaled_log_probs(logits, temps)
    p = np.exp(logp)
    # sum_j p_j (y_a - y_j) equals y_a - E_p[y] but is exactly 0 on constant rows
    d_temp = np.sum(p * (logits[idx, labels][:, None] - logits), axis=1) / temps**2
    return -logp[idx, labels], d_temp


def nll_grad_tau(logits, labels, tau: float) -> tuple[float, float]:
    """Mean NLL of ``softmax(logits / tau)`` and its exact derivative in ``tau``."""
    if not tau >= TAU_FLOOR:
        raise ValueError(f"temperature must be >= {TAU_FLOOR}, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    losses, d_temp = _nll_and_dT(logits, labels, np.full(len(labels), float(tau)))
    return float(np.mean(losses)), float(np.mean(d_temp))


def caring_loss_and_grads(model: Caring, logits, features, labels, weight_decay: float = 0.0):
    """Mean NLL plus L2 penalty on the weight matrices, and its gradients.

    Returns ``(loss, grads)`` where ``grads`` maps ``"w1", "b1", "w2", "b2"``
    to arrays shaped like the parameters.
    """
    logits = np.asarray(logits, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    pre, hid, out = model._forward(features)
    temps = 1.0 + np.maximum(out, 0.0)
    losses, d_temp = _nll_and_dT(logits, labels, temps)
    d_out = np.where(out > 0.0, d_temp, 0.0) / n
    d_pre = np.outer(d_out, model.w2[0]) * (pre > 0.0)
    grads = {
        "w1": d_pre.T @ features + weight_decay * model.w1,
        "b1": d_pre.sum(axis=0),
        "w2": (d_out @ hid)[None, :] + weight_decay * model.w2,
        "b2": np.float64(d_out.sum()),
    }
    penalty = 0.5 * weight_decay * (np.sum(model.w1**2) + np.sum(model.w2**2))
    return float(np.mean(losses) + penalty), grads


def fit_temperature(val: SampleSet, cfg: FitConfig = TEMPERATURE_DEFAULTS) -> tuple[Temperature, TrainingTrace]:
    """Full-batch gradient descent on mean NLL over a single temperature, from tau = 1."""
    logits, labels = val.logits, val.labels
    tau = 1.0
    trace = TrainingTrace()
    for epoch in range(1, cfg.epochs + 1):
        loss, grad = nll_grad_tau(logits, labels, tau)
        if not (math.isfinite(loss) and math.isfinite(grad)):
            raise NumericError(f"non-finite loss at epoch {epoch} (tau={tau!r})")
        tau = max(tau - cfg.lr * grad, TAU_FLOOR)
        logp = _scaled_log_probs(logits, np.full(len(labels), tau))
        trace.append(EpochRecord(epoch, float(-np.mean(logp[np.arange(len(labels)), labels])),
                                 _ece_from_log_probs(logp, labels), tau, 0.0))
    return Temperature(tau), trace


def init_caring(input_dim: int, hidden: int, seed: int) -> Caring:
    """Seeded fan-in initialisation with zero biases.

    ``W1`` is uniform in ``(-1/sqrt(input_dim), 1/sqrt(input_dim))``. ``W2`` is
    drawn from ``[0, 1/sqrt(hidden))`` so that, with non-negative hidden
    activations, the output relu starts active on every sample instead of
    possibly starting dead (where the gradient would be identically zero).
    """
    prng = Prng(seed)
    a1 = 1.0 / math.sqrt(input_dim)
    a2 = 1.0 / math.sqrt(hidden)
    w1 = prng.uniform_array((hidden, input_dim), -a1, a1)
    w2 = prng.uniform_array((1, hidden), 0.0, a2)
    return Caring(w1, np.zeros(hidden), w2, 0.0)


def fit_caring(val: SampleSet, cfg: FitConfig = CARING_DEFAULTS,
               init: Optional[Caring] = None) -> tuple[Caring, TrainingTrace]:
    """Fit the temperature network by (mini-)batch gradient descent on NLL.

    The logits are read-only inputs; only the network parameters move.
    With ``cfg.batch_size > 0`` samples are reshuffled each epoch by a PRNG
    seeded from ``cfg.seed`` (a jumped substream of the initialisation seed).
    """
    if val.features is None:
        raise DataError("features required to fit the CARING calibrator")
    logits, features, labels = val.logits, val.features, val.labels
    n = len(labels)
    model = init if init is not None else init_caring(features.shape[1], cfg.hidden, cfg.seed)
    if model.input_dim != features.shape[1]:
        raise DataError(f"feature dimension {features.shape[1]} does not match model input_dim {model.input_dim}")
    shuffler = Prng(cfg.seed)
    shuffler.jump()
    order = list(range(n))
    trace = TrainingTrace()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.batch_size and cfg.batch_size < n:
            shuffler.shuffle(order)
            batches = [np.array(order[i:i + cfg.batch_size]) for i in range(0, n, cfg.batch_size)]
        else:
            batches = [None]
        for rows in batches:
            if rows is None:
                loss, g = caring_loss_and_grads(model, logits, features, labels, cfg.weight_decay)
            else:
                loss, g = caring_loss_and_grads(model, logits[rows], features[rows], labels[rows],
                                                cfg.weight_decay)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            model = Caring(model.w1 - cfg.lr * g["w1"], model.b1 - cfg.lr * g["b1"],
                           model.w2 - cfg.lr * g["w2"], model.b2 - cfg.lr * float(g["b2"]))
        temps = model.temperatures(logits, features)
        logp = _scaled_log_probs(logits, temps)
        trace.append(EpochRecord(epoch, float(-np.mean(logp[np.arange(n), labels])),
                                 _ece_from_log_probs(logp, labels), float(np.mean(temps)), float(np.std(temps))))
    return model, trace


def model_to_dict(c: Calibrator) -> dict:
    if isinstance(c, Identity):
        return {"kind": "identity"}
    if isinstance(c, Temperature):
        return {"kind": "temperature", "tau": float(c.tau)}
    if isinstance(c, Caring):
        return {
            "kind": "caring",
            "hidden": c.hidden,
            "input_dim": c.input_dim,
            "w1": [float(x) for x in c.w1.ravel()],
            "b1": [float(x) for x in c.b1],
            "w2": [float(x) for x in c.w2.ravel()],
            "b2": float(c.b2),
        }
    raise TypeError(f"not a calibrator: {type(c).__name__}")


def model_from_dict(d: dict) -> Calibrator:
    kind = d.get("kind") if isinstance(d, dict) else None
    try:
        if kind == "identity":
            return Identity()
        if kind == "temperature":
            return Temperature(float(d["tau"]))
        if kind == "caring":
            h, dim = int(d["hidden"]), int(d["input_dim"])
            w1 = np.asarray(d["w1"], dtype=np.float64)
            b1 = np.asarray(d["b1"], dtype=np.float64)
            w2 = np.asarray(d["w2"], dtype=np.float64)
            if w1.shape != (h * dim,) or b1.shape != (h,) or w2.shape != (h,):
                raise ModelFormatError(
                    f"shape mismatch in model file: hidden={h}, input_dim={dim}, "
                    f"w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}")
            return Caring(w1.reshape(h, dim), b1, w2.reshape(1, h), float(d["b2"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"invalid {kind} model: {exc}") from None
    raise ModelFormatError(f"unknown model kind: {kind!r}")


def save_model(c: Calibrator, path) -> None:
    # json writes floats via repr, which round-trips bit-exactly
    Path(path).write_text(json.dumps(model_to_dict(c), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> Calibrator:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path.name}: invalid JSON ({exc})") from None
    return model_from_dict(d)
