"""Combining several concept adapters trained against the same base weight.

`fedavg_merge` averages dense deltas. `spectral_fuse` adds SpectralA
singular-vector updates, each in its own columns, before recombining with
the base singular values. `gradient_fusion` solves the least-squares problem
that keeps every concept's outputs on its own activations.
"""

import logging
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from adapters import AdapterKind, as_decomposition, as_dense, merge
from errors import PreconditionError, ShapeError
from linalg import ColumnSelect, as_matrix, fingerprint, numerical_rank

logger = logging.getLogger(__name__)

POLICIES = ("contiguous-top", "sampled", "explicit")


@dataclass(frozen=True, eq=False)
class FusionEntry:
    state: object
    weight: float = 1.0

    @property
    def columns(self):
        return self.state.columns


@dataclass(frozen=True, eq=False)
class FusionPlan:
    base: object
    entries: Sequence[FusionEntry]
    policy: str = "contiguous-top"

    def overlaps(self):
        return column_overlaps([e.columns for e in self.entries])


def column_overlaps(columns):
    """(i, j, shared column count) for every pair of selections that intersect."""

    return [(i, j, a.overlap(b)) for (i, a), (j, b) in combinations(enumerate(columns), 2)
            if a.overlap(b)]


def fedavg_merge(base, deltas, lambdas=None):
    """W0 + sum_i lambda_i * delta_i, with lambda_i = 1/n by default."""

    w = as_matrix(base, "base")
    deltas = [as_matrix(delta, "delta") for delta in deltas]
    if lambdas is None:
        lambdas = [1.0 / len(deltas)] * len(deltas) if deltas else []
    if len(lambdas) != len(deltas):
        raise ShapeError(f"{len(deltas)} deltas but {len(lambdas)} weights")
    merged = w.copy()
    for lam, delta in zip(lambdas, deltas):
        if delta.shape != w.shape:
            raise ShapeError(f"delta shape {delta.shape} does not match base {w.shape}")
        merged += lam * delta
    return merged


def spectral_fuse(plan):
    """(U0 + sum_i lambda_i U_i) diag(s0) (V0 + sum_i lambda_i V_i).T.

    U_i and V_i are entry i's SpectralA updates zero-padded into its columns.
    Every entry must be a SpectralA state fitted on the plan's base.
    """

    u, s, v = spectral_fuse_factors(plan)
    return (u * s) @ v.T


def spectral_fuse_factors(plan):
    """The fused left factor, base singular values and fused right factor."""

    d = as_decomposition(plan.base)
    expected = fingerprint(d)
    u, v = np.array(d.u), np.array(d.v)
    for i, entry in enumerate(plan.entries):
        state = entry.state
        if state.kind is not AdapterKind.SPECTRAL_A:
            raise PreconditionError(f"entry {i}: spectral fusion needs SpectralA adapters, got {state.kind.value}")
        if state.base_shape != d.shape:
            raise ShapeError(f"entry {i}: adapter expects a {state.base_shape} base, got {d.shape}")
        if state.base_fingerprint != expected:
            raise PreconditionError(f"entry {i}: adapter was trained against a different base decomposition")
        state.columns.check(d.k)

    overlapping = plan.overlaps()
    for i, j, count in overlapping:
        message = f"fusion entries {i} and {j} share {count} columns"
        logger.warning(message)
        warnings.warn(message, RuntimeWarning, stacklevel=2)

    pad_u, pad_v = np.zeros_like(u), np.zeros_like(v)
    for entry in plan.entries:
        idx = entry.columns.indices
        pad_u[:, idx] += entry.weight * entry.state.a_u
        pad_v[:, idx] += entry.weight * entry.state.a_v
    return u + pad_u, np.array(d.s), v + pad_v


def schedule_columns(num_concepts, r, k, policy="contiguous-top", seed=0, pool=None):
    """Column selections for `num_concepts` concepts of rank r among k columns.

    contiguous-top gives concept i the block [i*r, (i+1)*r). sampled draws r
    columns per concept without replacement from the first `pool` (default k).
    """

    if policy not in POLICIES:
        raise PreconditionError(f"unknown column policy {policy!r}; expected one of {POLICIES}")
    if policy == "explicit":
        raise PreconditionError("the explicit policy takes its columns from the plan")
    if policy == "contiguous-top":
        if num_concepts * r > k:
            raise PreconditionError(f"{num_concepts} concepts of rank {r} need {num_concepts * r} columns, only {k} exist")
        return [ColumnSelect.block(i, r) for i in range(num_concepts)]

    pool = k if pool is None else pool
    if not r <= pool <= k:
        raise PreconditionError(f"sampling pool must be between r={r} and k={k}, got {pool}")
    rng = np.random.default_rng(seed)
    return [ColumnSelect.from_indices(rng.choice(pool, size=r, replace=False)) for _ in range(num_concepts)]


@dataclass(frozen=True, eq=False)
class GradientFusionResult:
    weight: np.ndarray
    objective: float
    residual: float
    ridge: float


def _activations(base_shape, activations):
    xs = [as_matrix(x, "activations") for x in activations]
    for x in xs:
        if x.shape[0] != base_shape[1]:
            raise ShapeError(f"activations have {x.shape[0]} rows, base has {base_shape[1]} columns")
    return xs


def fusion_objective(base, deltas, activations, theta, ridge=0.0):
    """sum_i ||(W0 + delta_i) X_i - theta X_i||_F^2 + ridge * ||theta||_F^2."""

    w = as_matrix(base, "base")
    total = ridge * float(np.sum(theta * theta))
    for delta, x in zip(deltas, _activations(w.shape, activations)):
        total += float(np.sum(((w + delta - theta) @ x) ** 2))
    return total


def gradient_fusion(base, deltas, activations, ridge=None):
    """Closed-form minimizer of `fusion_objective`.

    theta = (sum_i (W0 + delta_i) X_i X_i.T) (sum_i X_i X_i.T + ridge I)^-1.
    The default ridge is 1e-8 * trace(Gram) / m. ridge=0 on a singular Gram
    matrix raises PreconditionError.
    """

    w = as_matrix(base, "base")
    deltas = [as_matrix(delta, "delta") for delta in deltas]
    xs = _activations(w.shape, activations)
    if len(deltas) != len(xs) or not deltas:
        raise ShapeError(f"need one activation matrix per delta, got {len(deltas)} deltas and {len(xs)} activations")

    m = w.shape[1]
    gram = np.zeros((m, m))
    rhs = np.zeros_like(w)
    for delta, x in zip(deltas, xs):
        if delta.shape != w.shape:
            raise ShapeError(f"delta shape {delta.shape} does not match base {w.shape}")
        xxt = x @ x.T
        gram += xxt
        rhs += (w + delta) @ xxt

    if ridge is None:
        ridge = 1e-8 * float(np.trace(gram)) / m
    if ridge < 0:
        raise PreconditionError(f"ridge must be nonnegative, got {ridge}")
    if ridge == 0 and numerical_rank(gram) < m:
        raise PreconditionError("activation Gram matrix is singular; pass a positive ridge")

    system = gram + ridge * np.eye(m)
    theta = np.linalg.solve(system, rhs.T).T
    residual = float(np.linalg.norm(2.0 * (theta @ system - rhs)))
    objective = fusion_objective(w, deltas, xs, theta, ridge)
    logger.info("gradient fusion of %d concepts: objective %.6e, optimality residual %.3e",
                len(deltas), objective, residual)
    return GradientFusionResult(weight=theta, objective=objective, residual=residual, ridge=ridge)


@dataclass(frozen=True, eq=False)
class IdentityReport:
    deviations: np.ndarray

    @property
    def worst(self):
        return float(np.max(self.deviations)) if self.deviations.size else 0.0


def identity_preservation_report(base, states, fused, probes):
    """Relative output change of each concept when its adapter is replaced by `fused`.

    deviation_i = ||(fused - merge(base, state_i)) P_i|| / ||merge(base, state_i) P_i||,
    or the absolute change when the reference output is zero.
    """

    fused = as_matrix(fused, "fused")
    if len(states) != len(probes):
        raise ShapeError(f"{len(states)} concepts but {len(probes)} probe sets")
    deviations = []
    for state, probe in zip(states, probes):
        reference = merge(base, state)
        probe = as_matrix(probe, "probe")
        if probe.shape[0] != reference.shape[1]:
            raise ShapeError(f"probes have {probe.shape[0]} rows, weight has {reference.shape[1]} columns")
        denom = np.linalg.norm(reference @ probe)
        change = np.linalg.norm((fused - reference) @ probe)
        deviations.append(change / denom if denom else change)
    return IdentityReport(np.array(deviations))


def adapter_deltas(base, states):
    """Dense deltas merge(base, state) - base for a list of states."""

    w = as_dense(base)
    return [merge(base, state) - w for state in states]


def plan_from_states(base, states, weights: Optional[Sequence[float]] = None, policy="explicit"):
    if weights is None:
        weights = [1.0 / len(states)] * len(states) if states else []
    return FusionPlan(base=base, entries=[FusionEntry(s, float(w)) for s, w in zip(states, weights)],
                      policy=policy)
