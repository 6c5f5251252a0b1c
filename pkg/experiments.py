"""Reproducible experiments built on the training harness.

* subspace alignment: first-layer neurons of a weight-decayed ReLU network
  trained on planar data end up in the data plane.
* rank recovery: LoRA and SpectralA of the same rank r try to remove the
  top 2r singular components of a base weight.
* loss comparison: loss curves of several adapter kinds at matched budgets.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from adapters import (AdapterKind, effective_weight, init_adapter, oft_block_sizes,
                      trainable_param_count)
from errors import PreconditionError
from generator.helpers import matrix_with_spectrum, planar_data
from linalg import ColumnSelect, numerical_rank, principal_angles, svd_thin
from rank_capacity import construct_min_rank
from training import (AdapterObjective, LinearRegressionTask, ToyNetConfig, ToyNetObjective,
                      ToyReLUNet, TrainConfig, train)

logger = logging.getLogger(__name__)

ALIGNMENT_RATIO = 1e-3
ALIGNMENT_ANGLE = 1e-2
NOISY_TOP_ANGLE = 5e-2


##############################################################################
# Subspace alignment


@dataclass(frozen=True)
class SubspaceExperiment:
    n_samples: int = 32
    hidden_dim: int = 24
    weight_decay: float = 0.01
    noise_scale: float = 0.1
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        optimizer="SGD", learning_rate=0.03, steps=30000, weight_decay=0.0, log_every=5000))


@dataclass(frozen=True, eq=False)
class SubspaceReport:
    weight_decay: float
    final_loss: float
    out_of_plane_max: float
    out_of_plane_ratio: float
    plane_angle: float
    top_direction_angle: float
    objective: float
    projected_objective: float
    noisy_neuron: int
    noisy_neuron_angle: float
    noisy_top_direction_angle: float
    aligned: bool
    trace: object = None

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "trace"}


def _neuron_geometry(w1, plane):
    """Out-of-plane norms of each neuron (columns of w1) and its norm."""

    inside = plane @ (plane.T @ w1)
    return np.linalg.norm(w1 - inside, axis=0), np.linalg.norm(w1, axis=0)


def _top_directions(w1, count):
    # rows of w1.T are neurons; their right singular vectors live in input space
    return svd_thin(w1.T).v[:, :count]


def _direction_angle(plane, vector):
    norm = np.linalg.norm(vector)
    if norm == 0:
        return 0.0
    return float(principal_angles(plane, (vector / norm)[:, None])[0])


def experiment_subspace_alignment(config=None, data=None, record_trace=True):
    """Train the two-layer ReLU network and measure how planar its neurons are.

    `data` is an optional (X, y) pair; by default planar points in the unit
    disk labelled by a random ReLU network are drawn from `config.seed`.
    """

    config = config or SubspaceExperiment()
    rng = np.random.default_rng(config.seed)
    x, y = data if data is not None else planar_data(rng, config.n_samples)
    net = ToyReLUNet(ToyNetConfig(inputs=x, labels=y, hidden_dim=config.hidden_dim,
                                  weight_decay=config.weight_decay))
    trace = train(ToyNetObjective(net, net.initial_parameters(rng)), config.train)
    params = trace.state
    w1 = params["w1"]

    d_x = svd_thin(net.config.inputs)
    plane_rank = numerical_rank(net.config.inputs)
    plane = d_x.v[:, :plane_rank]
    if plane_rank == w1.shape[0]:
        raise PreconditionError("inputs span the whole input space; there is no data plane")

    out_norms, norms = _neuron_geometry(w1, plane)
    mean_norm = float(np.mean(norms))
    out_max = float(np.max(out_norms))
    ratio = out_max / mean_norm if mean_norm > 0 else 0.0
    plane_angle = float(np.max(principal_angles(plane, _top_directions(w1, plane_rank))))
    top_angle = _direction_angle(plane, _top_directions(w1, 1)[:, 0])

    projected = dict(params, w1=plane @ (plane.T @ w1))
    objective = net.objective(params)
    projected_objective = net.objective(projected)

    # push one mid-sized neuron out of the plane and re-measure
    noisy = int(np.argsort(norms)[len(norms) // 2])
    normal = svd_thin(np.eye(w1.shape[0]) - plane @ plane.T).u[:, 0]
    w1_noisy = w1.copy()
    w1_noisy[:, noisy] += config.noise_scale * mean_norm * normal
    noisy_angle = _direction_angle(plane, w1_noisy[:, noisy])
    noisy_top = _direction_angle(plane, _top_directions(w1_noisy, 1)[:, 0])

    report = SubspaceReport(
        weight_decay=config.weight_decay,
        final_loss=trace.final_loss,
        out_of_plane_max=out_max,
        out_of_plane_ratio=ratio,
        plane_angle=plane_angle,
        top_direction_angle=top_angle,
        objective=objective,
        projected_objective=projected_objective,
        noisy_neuron=noisy,
        noisy_neuron_angle=noisy_angle,
        noisy_top_direction_angle=noisy_top,
        aligned=ratio <= ALIGNMENT_RATIO and plane_angle <= ALIGNMENT_ANGLE,
        trace=trace if record_trace else None,
    )
    logger.info("subspace alignment (beta=%g): ratio %.3e, plane angle %.3e, noisy top angle %.3e",
                config.weight_decay, ratio, plane_angle, noisy_top)
    return report


##############################################################################
# Rank recovery


@dataclass(frozen=True)
class RankRecoveryExperiment:
    n: int = 8
    m: int = 12
    rank: int = 2
    seed: int = 0
    n_samples: int = 48
    singular_values: Optional[Tuple[float, ...]] = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        optimizer="AdamW", learning_rate=1e-2, steps=3000, weight_decay=0.0, log_every=1000))

    def spectrum(self):
        k = min(self.n, self.m)
        if self.singular_values is None:
            return np.arange(k, 0, -1, dtype=np.float64)
        s = np.asarray(self.singular_values, dtype=np.float64)
        if s.shape != (k,) or np.any(s <= 0) or np.any(np.diff(s) > 0):
            raise PreconditionError(f"singular_values must be {k} positive non-increasing numbers")
        return s


@dataclass(frozen=True, eq=False)
class RankRecoveryReport:
    rank: int
    target_norm: float
    lora_floor: float
    lora_distance: float
    spectral_distance: float
    spectral_certified_distance: float
    certificate_distance: float
    spectral_bottom_distance: float
    traces: Dict[str, object] = field(default_factory=dict)

    @property
    def lora_floor_ratio(self):
        return self.lora_distance / self.lora_floor if self.lora_floor else 1.0

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "traces"}
        out["lora_floor_ratio"] = self.lora_floor_ratio
        return out


def _recovery_problem(config):
    rng = np.random.default_rng(config.seed)
    r, k = config.rank, min(config.n, config.m)
    if not 0 <= 2 * r <= k:
        raise PreconditionError(f"rank recovery needs 0 <= 2r <= min(n, m) = {k}, got r={r}")
    d = svd_thin(matrix_with_spectrum(rng, config.n, config.m, config.spectrum()))
    target = (d.u[:, 2 * r:] * d.s[2 * r:]) @ d.v[:, 2 * r:].T
    task = LinearRegressionTask.from_target(target, config.n_samples, rng)
    return d, target, task


def _fit(task, d, state, target, train_config):
    trace = train(AdapterObjective(task, d, state, target), train_config)
    return float(np.linalg.norm(effective_weight(d, trace.state) - target)), trace


def experiment_rank_recovery(config=None):
    """Remove the top 2r components of a base weight with rank-r adapters.

    LoRA is bounded below by the Eckart-Young floor sqrt(sum of s_i^2 for
    i in r..2r-1). SpectralA is trained from zero on the top r columns, from
    the minimum-rank construction, and from zero on the bottom r columns.
    `certificate_distance` is the construction's own distance before any
    training; the certified run only shows what the optimizer does from there.
    """

    config = config or RankRecoveryExperiment()
    r = config.rank
    d, target, task = _recovery_problem(config)
    floor = float(np.sqrt(np.sum(d.s[r:2 * r] ** 2)))

    certificate = construct_min_rank(AdapterKind.SPECTRAL_A, d, r)
    certificate_distance = float(np.linalg.norm(effective_weight(d, certificate) - target))

    runs = {
        "LoRA": init_adapter(AdapterKind.LORA, d, r, seed=config.seed),
        "SpectralA": init_adapter(AdapterKind.SPECTRAL_A, d, r),
        "SpectralA-certified": certificate,
        "SpectralA-bottom": init_adapter(AdapterKind.SPECTRAL_A, d, r,
                                         columns=ColumnSelect.bottom(r, d.k)),
    }
    distances, traces = {}, {}
    for name, state in runs.items():
        distances[name], traces[name] = _fit(task, d, state, target, config.train)
        logger.info("rank recovery %s: distance %.4f (floor %.4f)", name, distances[name], floor)

    return RankRecoveryReport(
        rank=r,
        target_norm=float(np.linalg.norm(target)),
        lora_floor=floor,
        lora_distance=distances["LoRA"],
        spectral_distance=distances["SpectralA"],
        spectral_certified_distance=distances["SpectralA-certified"],
        certificate_distance=certificate_distance,
        spectral_bottom_distance=distances["SpectralA-bottom"],
        traces=traces,
    )


##############################################################################
# Loss comparison at matched budgets


@dataclass(frozen=True, eq=False)
class LossCompareReport:
    budgets: Dict[str, int]
    ranks: Dict[str, int]
    curves: Dict[str, np.ndarray]
    lora_floor_loss: float

    def rows(self):
        """CSV rows: step followed by one loss column per kind."""

        names = list(self.curves)
        length = max(len(c) for c in self.curves.values())
        yield ["step"] + names
        for step in range(length):
            yield [step] + [repr(float(self.curves[n][step])) if step < len(self.curves[n]) else ""
                            for n in names]

    def to_dict(self):
        return {"budgets": self.budgets, "ranks": self.ranks,
                "final_loss": {n: float(c[-1]) for n, c in self.curves.items()},
                "lora_floor_loss": self.lora_floor_loss}


def matched_ranks(n, m, r):
    """Per-kind rank whose trainable budget is closest to, without exceeding, LoRA(r).

    OFT takes the largest shared budget not above LoRA's (or the smallest one
    available when none fits).
    """

    budget = trainable_param_count(AdapterKind.LORA, n, m, r)
    spectral_r = 0
    while 2 * (spectral_r + 1) ** 2 <= budget and spectral_r + 1 <= min(n, m):
        spectral_r += 1

    oft_options = [(trainable_param_count(AdapterKind.OFT, n, m, b), b)
                   for b in range(1, n + 1) if _oft_achievable(n, b)]
    fitting = [opt for opt in oft_options if opt[0] <= budget]
    oft_blocks = max(fitting)[1] if fitting else min(oft_options)[1]

    return {"LoRA": r, "SpectralA": r, "SpectralR": spectral_r, "OFT": oft_blocks,
            "SVDiff": 0, "Full": 0}


def _oft_achievable(n, blocks):
    try:
        oft_block_sizes(n, blocks)
    except PreconditionError:
        return False
    return True


def loss_compare(config=None):
    """Train each adapter kind on the rank-recovery task and collect loss curves."""

    config = config or RankRecoveryExperiment()
    d, target, task = _recovery_problem(config)
    r = config.rank
    ranks = matched_ranks(config.n, config.m, r)
    curves, budgets = {}, {}
    for name, rank in ranks.items():
        kind = AdapterKind(name)
        state = init_adapter(kind, d, rank, seed=config.seed)
        budgets[name] = state.parameter_count()
        trace = train(AdapterObjective(task, d, state, target), config.train)
        curves[name] = trace.losses
        logger.info("loss compare %s (%d params): final loss %.4e", name, budgets[name], trace.final_loss)

    floor = float(np.sum(d.s[r:2 * r] ** 2))
    return LossCompareReport(budgets=budgets, ranks=ranks, curves=curves, lora_floor_loss=floor)


def default_train_config(name):
    """Training settings each experiment uses when a config omits them."""

    return {"subspace": SubspaceExperiment().train,
            "rank-recovery": RankRecoveryExperiment().train,
            "loss-compare": RankRecoveryExperiment().train}[name]

