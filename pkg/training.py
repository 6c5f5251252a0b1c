"""Deterministic gradient training of adapters on desk-scale models.

Gradients are derived by hand: a model returns dL/dW for the effective
weight, and `adapters.backward` pulls it onto the adapter's trainable tensors.
`grad_check` compares that chain against central finite differences.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from adapters import (SPECTRAL_KINDS, AdapterKind, AdapterSpec, as_decomposition,
                      backward, effective_weight, init_adapter)
from errors import NumericalError, PreconditionError, ShapeError, TrainingDiverged
from linalg import as_matrix

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e12
OPTIMIZERS = ("SGD", "SGD-momentum", "AdamW")
# gradient entries below this fraction of the largest one are compared at that
# fraction, which stays above the rounding noise of a central difference
GRAD_FLOOR = 1e-3


##############################################################################
# Configuration


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for one training run.

    `weight_decay` None means the optimizer default (0 for SGD variants,
    0.01 for AdamW). `batch_size` None means full batch.
    """

    optimizer: str = "AdamW"
    learning_rate: float = 1e-2
    steps: int = 100
    batch_size: Optional[int] = None
    seed: int = 0
    weight_decay: Optional[float] = None
    momentum: float = 0.9
    line_search: bool = False
    log_every: int = 100
    adapter: AdapterSpec = field(default_factory=lambda: AdapterSpec(AdapterKind.LORA))

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise PreconditionError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise PreconditionError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 0:
            raise PreconditionError(f"steps must be nonnegative, got {self.steps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise PreconditionError(f"batch_size must be positive, got {self.batch_size}")
        if self.weight_decay is not None and not self.weight_decay >= 0:
            raise PreconditionError(f"weight_decay must be nonnegative, got {self.weight_decay}")


##############################################################################
# Optimizers


class SGD:
    """Plain gradient descent; weight decay is added to the gradient."""

    def __init__(self, learning_rate, weight_decay=0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def _direction(self, name, param, grad):
        return grad + self.weight_decay * param if self.weight_decay else grad

    def step(self, params, grads, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        return {name: p - lr * self._direction(name, p, grads[name]) for name, p in params.items()}


class SGDMomentum(SGD):
    def __init__(self, learning_rate, weight_decay=0.0, momentum=0.9):
        super().__init__(learning_rate, weight_decay)
        self.momentum = momentum
        self.buffers = {}

    def _direction(self, name, param, grad):
        grad = super()._direction(name, param, grad)
        buf = self.buffers.get(name)
        buf = grad.copy() if buf is None else self.momentum * buf + grad
        self.buffers[name] = buf
        return buf


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, learning_rate, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.t += 1
        fix1 = 1.0 - self.beta1 ** self.t
        fix2 = 1.0 - self.beta2 ** self.t
        updated = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = p - lr * self.weight_decay * p
            updated[name] = p - lr * (m / fix1) / (np.sqrt(v / fix2) + self.eps)
        return updated


def make_optimizer(config):
    if config.optimizer == "SGD":
        return SGD(config.learning_rate, config.weight_decay or 0.0)
    if config.optimizer == "SGD-momentum":
        return SGDMomentum(config.learning_rate, config.weight_decay or 0.0, config.momentum)
    wd = 0.01 if config.weight_decay is None else config.weight_decay
    return AdamW(config.learning_rate, wd)


##############################################################################
# Models


class LinearRegressionTask:
    """Fit x -> W x; loss is ||X W.T - Y||_F^2 / N over the selected rows."""

    def __init__(self, inputs, targets):
        self.inputs = as_matrix(inputs, "inputs")
        self.targets = as_matrix(targets, "targets")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets")

    @classmethod
    def from_target(cls, target, n_samples, rng):
        """Random Gaussian inputs labelled by the linear map `target`."""

        target = as_matrix(target, "target")
        inputs = rng.standard_normal((n_samples, target.shape[1]))
        return cls(inputs, inputs @ target.T)

    @property
    def n_samples(self):
        return self.inputs.shape[0]

    def _rows(self, rows):
        if rows is None:
            return self.inputs, self.targets
        return self.inputs[rows], self.targets[rows]

    def loss(self, weight, rows=None):
        x, y = self._rows(rows)
        resid = x @ weight.T - y
        return float(np.sum(resid * resid) / x.shape[0])

    def loss_and_weight_grad(self, weight, rows=None):
        x, y = self._rows(rows)
        if weight.shape[1] != x.shape[1] or weight.shape[0] != y.shape[1]:
            raise ShapeError(f"weight {weight.shape} does not map {x.shape[1]} inputs to {y.shape[1]} outputs")
        resid = x @ weight.T - y
        count = x.shape[0]
        return float(np.sum(resid * resid) / count), (2.0 / count) * resid.T @ x

    def exact_step(self, grad_weight, rows=None):
        """Loss-minimizing step size along -grad_weight (the loss is quadratic in W)."""

        x, _ = self._rows(rows)
        curvature = np.sum((x @ grad_weight.T) ** 2)
        if curvature == 0:
            return 0.0
        return float(np.sum(grad_weight * grad_weight) * x.shape[0] / (2.0 * curvature))


@dataclass(frozen=True, eq=False)
class ToyNetConfig:
    """Two-layer ReLU regression problem.

    Objective: ||relu(X W1) w2 - y||^2 / N + beta * (||W1||_F^2 + ||w2||^2).
    """

    inputs: np.ndarray
    labels: np.ndarray
    hidden_dim: int = 24
    weight_decay: float = 0.01
    init_scale: float = 1.0

    def __post_init__(self):
        x = as_matrix(self.inputs, "inputs")
        y = np.asarray(self.labels, dtype=np.float64)
        if y.shape != (x.shape[0],):
            raise ShapeError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise PreconditionError(f"weight_decay must be finite and nonnegative, got {self.weight_decay}")
        if self.hidden_dim < 1:
            raise PreconditionError(f"hidden_dim must be positive, got {self.hidden_dim}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def input_dim(self):
        return self.inputs.shape[1]


class ToyReLUNet:
    def __init__(self, config):
        self.config = config

    @property
    def n_samples(self):
        return self.config.inputs.shape[0]

    def initial_parameters(self, rng):
        d, h = self.config.input_dim, self.config.hidden_dim
        scale = self.config.init_scale
        return {"w1": scale * rng.standard_normal((d, h)) / math.sqrt(d),
                "w2": scale * rng.standard_normal(h) / math.sqrt(h)}

    def objective(self, params):
        return self.loss_and_grad(params)[0]

    def loss_and_grad(self, params, rows=None):
        x, y = self.config.inputs, self.config.labels
        if rows is not None:
            x, y = x[rows], y[rows]
        w1, w2 = params["w1"], params["w2"]
        beta = self.config.weight_decay

        pre = x @ w1
        act = np.maximum(pre, 0.0)
        resid = act @ w2 - y
        count = x.shape[0]
        loss = np.sum(resid * resid) / count + beta * (np.sum(w1 * w1) + np.sum(w2 * w2))

        d_out = (2.0 / count) * resid
        # subgradient of relu at exactly 0 is 0
        d_pre = np.outer(d_out, w2) * (pre > 0)
        return float(loss), {"w1": x.T @ d_pre + 2.0 * beta * w1,
                             "w2": act.T @ d_out + 2.0 * beta * w2}


##############################################################################
# Objectives seen by the trainer


def loss_and_grad(task, base, state, batch=None):
    """Loss of the adapted model and gradients of the adapter's trainable tensors."""

    weight = effective_weight(base, state)
    loss, grad_weight = task.loss_and_weight_grad(weight, batch)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss for {state.kind.value} adapter")
    return loss, backward(base, state, grad_weight)


class AdapterObjective:
    """Trains one adapter state against a LinearRegressionTask.

    Spectral and SVDiff kinds get the base decomposed once up front. The
    metric is the Frobenius distance to `target` when one is given.
    """

    def __init__(self, task, base, state, target=None):
        self.task = task
        if state.kind in SPECTRAL_KINDS or state.kind is AdapterKind.SVDIFF:
            base = as_decomposition(base)
        self.base = base
        self.state = state
        self.target = None if target is None else as_matrix(target, "target")

    @property
    def n_samples(self):
        return self.task.n_samples

    def parameters(self):
        return self.state.trainable()

    def frozen(self):
        return self.state.frozen()

    def finalize(self, params):
        return self.state.replace(**params)

    def evaluate(self, params, rows=None):
        return loss_and_grad(self.task, self.base, self.finalize(params), rows)

    def metric(self, params):
        if self.target is None:
            return None
        return float(np.linalg.norm(effective_weight(self.base, self.finalize(params)) - self.target))

    def exact_step(self, params, grads, rows=None):
        if self.state.kind is not AdapterKind.FULL:
            raise PreconditionError("exact line search needs a Full adapter (loss quadratic in the parameters)")
        return self.task.exact_step(grads["delta"], rows)


class ToyNetObjective:
    """Trains both layers of a ToyReLUNet from a seeded random start."""

    def __init__(self, net, params):
        self.net = net
        self.initial = params

    @property
    def n_samples(self):
        return self.net.n_samples

    def parameters(self):
        return dict(self.initial)

    def frozen(self):
        return {}

    def finalize(self, params):
        return params

    def evaluate(self, params, rows=None):
        loss, grads = self.net.loss_and_grad(params, rows)
        if not math.isfinite(loss):
            raise NumericalError("non-finite loss for two-layer ReLU network")
        return loss, grads

    def metric(self, params):
        return None

    def exact_step(self, params, grads, rows=None):
        raise PreconditionError("exact line search is not available for the ReLU network")


##############################################################################
# Trainer


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    metric: Optional[float]
    param_norm: float


@dataclass(eq=False)
class TrainTrace:
    records: List[TraceRecord]
    state: object = None

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return np.array([r.loss for r in self.records])

    @property
    def final_loss(self):
        return self.records[-1].loss

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["step", "loss", "metric", "param_norm"])
            for r in self.records:
                writer.writerow([r.step, repr(r.loss), "" if r.metric is None else repr(r.metric),
                                 repr(r.param_norm)])


def _param_norm(params: Dict[str, np.ndarray]):
    return float(math.sqrt(sum(float(np.sum(p * p)) for p in params.values())))


def _batch_rows(rng, n_samples, batch_size):
    if batch_size is None or batch_size >= n_samples:
        return None
    return np.sort(rng.choice(n_samples, size=batch_size, replace=False))


def train(objective, config):
    """Run `config.steps` optimizer steps and record the loss before each one.

    The trace has steps + 1 records. Divergence (loss above DIVERGENCE_LOSS)
    raises TrainingDiverged carrying the trace so far.
    """

    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config)
    params = objective.parameters()
    records = []

    for step in range(config.steps + 1):
        rows = _batch_rows(rng, objective.n_samples, config.batch_size)
        try:
            loss, grads = objective.evaluate(params, rows)
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}") from exc
        records.append(TraceRecord(step, loss, objective.metric(params), _param_norm(params)))

        if loss > DIVERGENCE_LOSS:
            trace = TrainTrace(records, objective.finalize(params))
            raise TrainingDiverged(f"loss {loss:.3e} exceeded {DIVERGENCE_LOSS:.0e} at step {step}", trace)
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d loss %.6e", step, loss)
        if step == config.steps:
            break

        lr = objective.exact_step(params, grads, rows) if config.line_search else None
        params = optimizer.step(params, grads, lr)

    return TrainTrace(records, objective.finalize(params))


##############################################################################
# Gradient verification


def _perturbed_state(state, base_decomposition, rng):
    kind = state.kind
    params = {}
    for name, arr in state.trainable().items():
        noise = rng.standard_normal(arr.shape)
        if kind is AdapterKind.SVDIFF:
            # stay clear of the clamp at s + delta_s = 0
            params[name] = 0.1 * base_decomposition.s * noise
        elif name == "magnitude":
            params[name] = arr * (1.0 + 0.1 * noise)
        else:
            params[name] = arr + 0.3 * noise
    return state.replace(**params)


def grad_check(kind, base, rank=1, seed=0, n_samples=None, **extras):
    """Worst relative error between analytic and central finite-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor)
    with step h = 1e-6 * (1 + |theta|). The floor is GRAD_FLOOR times the largest
    analytic gradient entry, so the measure does not depend on the loss scale.
    """

    kind = AdapterKind(kind)
    w = as_matrix(base, "base")
    n, m = w.shape
    rng = np.random.default_rng(seed)
    decomposition = as_decomposition(w)
    base_form = decomposition if kind in SPECTRAL_KINDS or kind is AdapterKind.SVDIFF else w

    state = _perturbed_state(init_adapter(kind, base_form, rank, seed=seed, **extras), decomposition, rng)
    count = n_samples or 2 * max(n, m)
    task = LinearRegressionTask(rng.standard_normal((count, m)), rng.standard_normal((count, n)))
    _, analytic = loss_and_grad(task, base_form, state)
    scale = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size), default=0.0)
    floor = max(GRAD_FLOOR * scale, np.finfo(np.float64).tiny)

    worst = 0.0
    for name, value in state.trainable().items():
        flat = value.ravel()
        for i in range(flat.size):
            h = 1e-6 * (1.0 + abs(flat[i]))
            losses = []
            for sign in (1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * h
                trial = state.replace(**{name: probe.reshape(value.shape)})
                losses.append(task.loss(effective_weight(base_form, trial)))
            numeric = (losses[0] - losses[1]) / (2.0 * h)
            exact = analytic[name].ravel()[i]
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))

    logger.info("grad check %s on %dx%d rank %d: max relative error %.3e", kind.value, n, m, rank, worst)
    return worst
