"""Range of ranks an adapter can give the adapted weight.

For a full-rank base W of shape n x m (k = min(n, m)) LoRA of rank r can
bring rank(W') down to k - r, a SpectralA adapter on r columns down to
k - 2r, and orthogonal kinds (SpectralR, OFT) cannot change it at all.
`construct_min_rank` builds the witnesses; `rank_capacity_empirical`
samples random adapters to bound the reachable range from the other side.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from adapters import (SPECTRAL_KINDS, AdapterKind, as_decomposition,
                      effective_weight, init_adapter)
from errors import PreconditionError
from linalg import ColumnSelect, numerical_rank, reconstruct

logger = logging.getLogger(__name__)

ORTHOGONAL_KINDS = (AdapterKind.SPECTRAL_R, AdapterKind.OFT)


@dataclass(frozen=True, eq=False)
class RankCapacityReport:
    kind: AdapterKind
    rank: int
    k: int
    base_rank: int
    full_rank: bool
    min_rank_achieved: int
    max_rank_achieved: int
    trials: int
    certificate: Optional[object] = None

    @property
    def capacity(self):
        return self.max_rank_achieved - self.min_rank_achieved

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "rank": self.rank,
            "base_rank": self.base_rank,
            "full_rank": self.full_rank,
            "min_rank_achieved": self.min_rank_achieved,
            "max_rank_achieved": self.max_rank_achieved,
            "capacity": self.capacity,
            "theoretical_min_rank": theoretical_min_rank(self.kind, self.k, self.rank),
            "trials": self.trials,
            "certified": self.certificate is not None,
        }


def theoretical_min_rank(kind, k, r):
    """Smallest rank of the adapted weight on a full-rank base, or None if unknown."""

    kind = AdapterKind(kind)
    if kind is AdapterKind.LORA:
        return max(k - r, 0)
    if kind is AdapterKind.SPECTRAL_A:
        return max(k - 2 * r, 0)
    if kind in ORTHOGONAL_KINDS:
        return k
    if kind in (AdapterKind.SVDIFF, AdapterKind.FULL):
        return 0
    return None


def _require_full_rank(d):
    rank = numerical_rank(reconstruct(d))
    if rank != d.k:
        raise PreconditionError(f"base has rank {rank} < min(n, m) = {d.k}; rank bounds assume full row rank")


def construct_min_rank(kind, base, r):
    """Adapter state whose adapted weight has the smallest reachable rank.

    LoRA(r) removes the top r singular triples. SpectralA(r) on the columns
    [r, 2r) sends them onto -(top r) so both blocks cancel, leaving rank k - 2r.
    """

    kind = AdapterKind(kind)
    d = as_decomposition(base)
    k = d.k
    if kind not in (AdapterKind.LORA, AdapterKind.SPECTRAL_A):
        raise PreconditionError(f"no minimum-rank construction for {kind.value}")
    limit = k if kind is AdapterKind.LORA else k // 2
    if not 0 <= r <= limit:
        raise PreconditionError(f"{kind.value} construction needs 0 <= r <= {limit}, got {r}")
    _require_full_rank(d)

    if kind is AdapterKind.LORA:
        state = init_adapter(kind, d, r)
        if r == 0:
            return state
        return state.replace(a=-(d.u[:, :r] * d.s[:r]), b=d.v[:, :r])

    columns = ColumnSelect(r, r)
    state = init_adapter(kind, d, r, columns=columns)
    if r == 0:
        return state
    u1, s1, v1 = d.u[:, :r], d.s[:r], d.v[:, :r]
    uj, sj, vj = d.columns(columns)
    # (u_j + a_u) s_j (v_j + a_v).T == -u1 s1 v1.T for each pair
    return state.replace(a_u=u1 - uj, a_v=-(v1 * (s1 / sj)) - vj)


def _random_state(kind, d, base, r, rng, extras):
    state = init_adapter(kind, d if kind in SPECTRAL_KINDS or kind is AdapterKind.SVDIFF else base,
                         r, seed=int(rng.integers(2 ** 31)), **extras)
    params = {}
    for name, value in state.trainable().items():
        noise = rng.standard_normal(value.shape)
        if kind is AdapterKind.SVDIFF:
            params[name] = float(np.mean(d.s)) * noise
        elif name == "magnitude":
            params[name] = value * (1.0 + 0.1 * noise)
        else:
            params[name] = noise
    return state.replace(**params)


def rank_capacity_empirical(kind, base, r, trials=50, seed=0, strict=True, **extras):
    """Observed min/max rank of the adapted weight over random and certified states.

    Trial t draws from default_rng([seed, t]), so any subset of trials can be
    rerun independently. With strict=False a rank-deficient base is reported
    (full_rank False) instead of rejected.
    """

    kind = AdapterKind(kind)
    d = as_decomposition(base)
    # dense kinds see the same matrix the certificates are built from
    w = reconstruct(d)
    base_rank = numerical_rank(w)
    full_rank = base_rank == d.k
    if not full_rank and strict:
        raise PreconditionError(f"base has rank {base_rank} < min(n, m) = {d.k}; rank bounds assume full row rank")
    if trials < 0:
        raise PreconditionError(f"trials must be nonnegative, got {trials}")

    base_form = d if kind in SPECTRAL_KINDS or kind is AdapterKind.SVDIFF else w
    # the zero-delta initialization is always reachable
    ranks = [numerical_rank(effective_weight(base_form, init_adapter(kind, base_form, r, seed=seed, **extras)))]
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        ranks.append(numerical_rank(effective_weight(base_form, _random_state(kind, d, w, r, rng, extras))))

    certificate = None
    limit = d.k if kind is AdapterKind.LORA else d.k // 2
    if kind in (AdapterKind.LORA, AdapterKind.SPECTRAL_A) and full_rank and r <= limit:
        certificate = construct_min_rank(kind, d, r)
    elif kind is AdapterKind.SVDIFF:
        certificate = init_adapter(kind, d, r).replace(delta_s=-np.array(d.s))
    elif kind is AdapterKind.FULL:
        certificate = init_adapter(kind, w, r).replace(delta=-w)
    if certificate is not None:
        ranks.append(numerical_rank(effective_weight(base_form, certificate)))

    report = RankCapacityReport(kind=kind, rank=r, k=d.k, base_rank=base_rank, full_rank=full_rank,
                                min_rank_achieved=min(ranks), max_rank_achieved=max(ranks),
                                trials=trials, certificate=certificate)
    logger.info("rank capacity of %s(r=%d): ranks in [%d, %d] over %d trials",
                kind.value, r, report.min_rank_achieved, report.max_rank_achieved, trials)
    return report
