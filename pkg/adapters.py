"""Adapter parameterizations of a pretrained weight matrix.

Each adapter kind keeps its trainable tensors (and, for VeRA and LiDB, its
frozen auxiliary tensors) in an immutable state object. `effective_weight`
applies a state to a base weight, `backward` pulls a gradient with respect to
the effective weight back onto the trainable tensors, and the budget helpers
count trainable scalars the same way the optimizer enumerates them.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import ClassVar, Optional, Tuple

import numpy as np

from errors import NumericalError, PreconditionError, ShapeError
from linalg import (ColumnSelect, SpectralDecomposition, as_matrix, canonicalize,
                    fingerprint, reconstruct, svd_thin)

logger = logging.getLogger(__name__)

LIDB_DEFAULT_A = 50
LIDB_DEFAULT_B = 100


class AdapterKind(str, Enum):
    SPECTRAL_A = "SpectralA"
    SPECTRAL_R = "SpectralR"
    LORA = "LoRA"
    OFT = "OFT"
    SVDIFF = "SVDiff"
    VERA = "VeRA"
    LIDB = "LiDB"
    DORA_VECTOR = "DoRAVector"
    FULL = "Full"


SPECTRAL_KINDS = (AdapterKind.SPECTRAL_A, AdapterKind.SPECTRAL_R)


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


##############################################################################
# States


@dataclass(frozen=True, eq=False)
class AdapterState:
    """Common header of every adapter state.

    Subclasses list their tensors in TRAINABLE and FROZEN; everything else on
    the dataclass is a scalar setting serialized as an extra.
    """

    kind: ClassVar[AdapterKind]
    TRAINABLE: ClassVar[Tuple[str, ...]] = ()
    FROZEN: ClassVar[Tuple[str, ...]] = ()

    base_shape: Tuple[int, int]
    rank: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "base_shape", tuple(int(x) for x in self.base_shape))
        for name in self.TRAINABLE + self.FROZEN:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def trainable(self):
        return {name: getattr(self, name) for name in self.TRAINABLE}

    def frozen(self):
        return {name: getattr(self, name) for name in self.FROZEN}

    def tensors(self):
        return {**self.trainable(), **self.frozen()}

    def replace(self, **tensors):
        """New state with the named trainable tensors swapped out."""

        unknown = set(tensors) - set(self.trainable())
        if unknown:
            raise KeyError(f"{self.kind.value} has no trainable tensors {sorted(unknown)}")
        return dataclasses.replace(self, **tensors)

    def parameter_count(self):
        return int(sum(arr.size for arr in self.trainable().values()))

    def extras(self):
        skip = {"base_shape", "rank", "seed", "columns"} | set(self.TRAINABLE) | set(self.FROZEN)
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}

    @classmethod
    def from_parts(cls, base_shape, rank, seed, columns, extras, tensors):
        kwargs = dict(base_shape=base_shape, rank=rank, seed=seed, **extras, **tensors)
        if "columns" in {f.name for f in fields(cls)}:
            kwargs["columns"] = columns
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class SpectralAState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.SPECTRAL_A
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("a_u", "a_v")

    columns: ColumnSelect
    base_fingerprint: str
    a_u: np.ndarray
    a_v: np.ndarray


@dataclass(frozen=True, eq=False)
class SpectralRState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.SPECTRAL_R
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("raw_u", "raw_v")

    columns: ColumnSelect
    base_fingerprint: str
    raw_u: np.ndarray
    raw_v: np.ndarray


@dataclass(frozen=True, eq=False)
class LoRAState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.LORA
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("a", "b")

    a: np.ndarray
    b: np.ndarray
    alpha: Optional[float] = None

    @property
    def scale(self):
        if self.alpha is None or self.rank == 0:
            return 1.0
        return self.alpha / self.rank


@dataclass(frozen=True, eq=False)
class OFTState(AdapterState):
    """Block-diagonal orthogonal multiplier; `rank` is the number of blocks.

    With `shared` a single generator drives every block (the trailing short
    block, if any, uses its leading sub-block).
    """

    kind: ClassVar[AdapterKind] = AdapterKind.OFT

    shared: bool
    raw: Tuple[np.ndarray, ...]

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "raw", tuple(_frozen(r) for r in self.raw))

    def trainable(self):
        if self.shared:
            return {"raw": self.raw[0]}
        return {f"raw_{i}": r for i, r in enumerate(self.raw)}

    def replace(self, **tensors):
        current = self.trainable()
        unknown = set(tensors) - set(current)
        if unknown:
            raise KeyError(f"OFT has no trainable tensors {sorted(unknown)}")
        current.update(tensors)
        return dataclasses.replace(self, raw=tuple(current.values()))

    def extras(self):
        return {"shared": self.shared}

    @classmethod
    def from_parts(cls, base_shape, rank, seed, columns, extras, tensors):
        return cls(base_shape=base_shape, rank=rank, seed=seed, shared=extras["shared"],
                   raw=tuple(tensors.values()))


@dataclass(frozen=True, eq=False)
class SVDiffState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.SVDIFF
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("delta_s",)

    delta_s: np.ndarray


@dataclass(frozen=True, eq=False)
class VeRAState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.VERA
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("lambda_a", "lambda_b")
    FROZEN: ClassVar[Tuple[str, ...]] = ("a", "b")

    a: np.ndarray
    b: np.ndarray
    lambda_a: np.ndarray
    lambda_b: np.ndarray


@dataclass(frozen=True, eq=False)
class LiDBState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.LIDB
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("a", "b_t")
    FROZEN: ClassVar[Tuple[str, ...]] = ("a_aux", "b_aux")

    a_aux: np.ndarray
    b_aux: np.ndarray
    a: np.ndarray
    b_t: np.ndarray


@dataclass(frozen=True, eq=False)
class DoRAVectorState(AdapterState):
    """Column-wise magnitude/direction adapter.

    variant "dora": w_j = magnitude_j * v_j / |v_j| with V = W + direction_b @ direction_a.
    variant "spectral": w_j = (w0_j / |w0_j| + a_prime_j) * |w0_j| * (1 + b_prime_j).
    A single-column base with rank 1 is the vector form.
    """

    kind: ClassVar[AdapterKind] = AdapterKind.DORA_VECTOR
    VARIANTS: ClassVar[Tuple[str, ...]] = ("dora", "spectral")

    variant: str
    magnitude: np.ndarray
    direction_b: np.ndarray
    direction_a: np.ndarray
    a_prime: np.ndarray
    b_prime: np.ndarray

    @property
    def TRAINABLE(self):
        if self.variant == "dora":
            return ("magnitude", "direction_b", "direction_a")
        return ("a_prime", "b_prime")

    @property
    def FROZEN(self):
        if self.variant == "dora":
            return ("a_prime", "b_prime")
        return ("magnitude", "direction_b", "direction_a")


@dataclass(frozen=True, eq=False)
class FullState(AdapterState):
    kind: ClassVar[AdapterKind] = AdapterKind.FULL
    TRAINABLE: ClassVar[Tuple[str, ...]] = ("delta",)

    delta: np.ndarray


STATE_CLASSES = {cls.kind: cls for cls in (
    SpectralAState, SpectralRState, LoRAState, OFTState, SVDiffState,
    VeRAState, LiDBState, DoRAVectorState, FullState)}


@dataclass(frozen=True, eq=False)
class AdapterSpec:
    """Which adapter to attach: kind, rank and (for spectral kinds) columns."""

    kind: AdapterKind
    rank: int = 1
    columns: Optional[ColumnSelect] = None
    extras: dict = field(default_factory=dict)


##############################################################################
# Helpers


def as_decomposition(base):
    if isinstance(base, SpectralDecomposition):
        return base
    return svd_thin(base)


def as_dense(base):
    if isinstance(base, SpectralDecomposition):
        return reconstruct(base)
    return as_matrix(base, "base")


def _base_shape(base):
    if isinstance(base, SpectralDecomposition):
        return base.shape
    return np.shape(base)


def _check_shape(base, state):
    shape = tuple(_base_shape(base))
    if shape != state.base_shape:
        raise ShapeError(f"{state.kind.value} adapter expects a {state.base_shape} base, got {shape}")


def column_norms(w):
    return np.sqrt(np.einsum("ij,ij->j", w, w))


def oft_block_sizes(n, num_blocks):
    """Sizes of the diagonal blocks for `num_blocks` blocks over n rows."""

    if not 1 <= num_blocks <= n:
        raise PreconditionError(f"OFT needs between 1 and {n} blocks, got {num_blocks}")
    size = -(-n // num_blocks)
    if -(-n // size) != num_blocks:
        raise PreconditionError(f"OFT with {num_blocks} blocks is not achievable for n={n}")
    sizes = [size] * (n // size)
    if n % size:
        sizes.append(n % size)
    return sizes


def cayley(raw):
    """Orthogonal matrix (I + Q)(I - Q)^-1 with Q = (raw - raw.T) / 2."""

    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ShapeError(f"Cayley map needs a square matrix, got {raw.shape}")
    n = raw.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    q = (raw - raw.T) / 2.0
    eye = np.eye(n)
    try:
        # R.T = (I + Q)^-1 (I - Q) because (I - Q).T = I + Q
        r = np.linalg.solve(eye + q, eye - q).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cayley solve failed for a {n}x{n} generator; input is corrupted") from exc
    if not np.all(np.isfinite(r)):
        raise NumericalError(f"Cayley map of a {n}x{n} generator produced non-finite values")
    return r


def cayley_backward(raw, grad_r):
    """Gradient with respect to `raw` given the gradient with respect to cayley(raw).

    Uses dR = (I + R) dQ (I - Q)^-1 and dQ = (dA - dA.T) / 2.
    """

    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    q = (raw - raw.T) / 2.0
    eye = np.eye(n)
    r = cayley(raw)
    # grad_r @ (I - Q)^-T == grad_r @ (I + Q)^-1
    m = np.linalg.solve(eye - q, grad_r.T).T
    h = (eye + r).T @ m
    return (h - h.T) / 2.0


##############################################################################
# Initialization


def init_adapter(kind, base, rank=1, columns=None, seed=0, **extras):
    """Zero-delta adapter state for `base`.

    Spectral kinds select `columns` (default: top `rank`). Frozen auxiliary
    tensors and nonzero trainable factors are drawn from `seed`.
    """

    kind = AdapterKind(kind)
    n, m = _base_shape(base)
    k = min(n, m)
    rng = np.random.default_rng(seed)
    if rank < 0:
        raise PreconditionError(f"rank must be nonnegative, got {rank}")
    header = dict(base_shape=(n, m), rank=rank, seed=seed)

    if kind in SPECTRAL_KINDS:
        columns = columns or ColumnSelect.top(rank)
        if columns.count != rank:
            raise ShapeError(f"column selection {columns.describe()} does not hold {rank} columns")
        columns.check(k)
        d = as_decomposition(base)
        if kind is AdapterKind.SPECTRAL_A:
            if 2 * rank > k:
                message = f"SpectralA rank {rank} exceeds half of min(n, m)={k}; rank capacity bound does not apply"
                logger.warning(message)
                warnings.warn(message, RuntimeWarning, stacklevel=2)
            return SpectralAState(**header, columns=columns, base_fingerprint=fingerprint(d),
                                  a_u=np.zeros((n, rank)), a_v=np.zeros((m, rank)))
        return SpectralRState(**header, columns=columns, base_fingerprint=fingerprint(d),
                              raw_u=np.zeros((rank, rank)), raw_v=np.zeros((rank, rank)))

    if kind is AdapterKind.LORA:
        a = rng.standard_normal((n, rank)) / math.sqrt(rank) if rank else np.zeros((n, 0))
        return LoRAState(**header, a=a, b=np.zeros((m, rank)), alpha=extras.get("alpha"))

    if kind is AdapterKind.OFT:
        sizes = oft_block_sizes(n, rank)
        shared = bool(extras.get("shared", True))
        raw = (np.zeros((sizes[0], sizes[0])),) if shared else tuple(np.zeros((s, s)) for s in sizes)
        return OFTState(**header, shared=shared, raw=raw)

    if kind is AdapterKind.SVDIFF:
        return SVDiffState(**header, delta_s=np.zeros(k))

    if kind is AdapterKind.FULL:
        return FullState(**header, delta=np.zeros((n, m)))

    if rank < 1:
        raise PreconditionError(f"{kind.value} needs rank >= 1, got {rank}")

    if kind is AdapterKind.VERA:
        return VeRAState(**header, a=rng.standard_normal((n, rank)), b=rng.standard_normal((m, rank)),
                         lambda_a=np.ones(n), lambda_b=np.zeros(rank))

    if kind is AdapterKind.LIDB:
        aux_a = int(extras.get("aux_a", LIDB_DEFAULT_A))
        aux_b = int(extras.get("aux_b", LIDB_DEFAULT_B))
        return LiDBState(**header,
                         a_aux=rng.standard_normal((n, aux_a)) / math.sqrt(aux_a),
                         b_aux=rng.standard_normal((aux_b, m)) / math.sqrt(aux_b),
                         a=np.zeros((aux_a, rank)),
                         b_t=rng.standard_normal((aux_b, rank)) / math.sqrt(rank))

    # DoRAVector
    variant = extras.get("variant", "dora")
    if variant not in DoRAVectorState.VARIANTS:
        raise PreconditionError(f"unknown DoRAVector variant {variant!r}")
    norms = column_norms(as_dense(base))
    if np.any(norms == 0):
        raise PreconditionError("DoRAVector needs a base without zero columns")
    return DoRAVectorState(**header, variant=variant, magnitude=norms,
                           direction_b=rng.standard_normal((n, rank)) / math.sqrt(rank),
                           direction_a=np.zeros((rank, m)),
                           a_prime=np.zeros((n, m)), b_prime=np.zeros(m))


##############################################################################
# Forward


def _tuned_factors(d, state):
    u, v = np.array(d.u), np.array(d.v)
    idx = state.columns.indices
    if state.kind is AdapterKind.SPECTRAL_A:
        u[:, idx] += state.a_u
        v[:, idx] += state.a_v
    else:
        u[:, idx] = u[:, idx] @ cayley(state.raw_u)
        v[:, idx] = v[:, idx] @ cayley(state.raw_v)
    return u, v


def _oft_rotations(state):
    sizes = oft_block_sizes(state.base_shape[0], state.rank)
    if state.shared:
        return [cayley(state.raw[0][:s, :s]) for s in sizes]
    return [cayley(r) for r in state.raw]


def _svdiff_values(d, state):
    return np.maximum(d.s + state.delta_s, 0.0)


def effective_weight(base, state):
    """The adapted weight matrix for `state` applied to `base`."""

    _check_shape(base, state)
    kind = state.kind

    if kind in SPECTRAL_KINDS:
        d = as_decomposition(base)
        state.columns.check(d.k)
        u, v = _tuned_factors(d, state)
        return (u * d.s) @ v.T

    if kind is AdapterKind.SVDIFF:
        d = as_decomposition(base)
        return (d.u * _svdiff_values(d, state)) @ d.v.T

    w = as_dense(base)
    if kind is AdapterKind.LORA:
        return w + state.scale * (state.a @ state.b.T)
    if kind is AdapterKind.FULL:
        return w + state.delta
    if kind is AdapterKind.VERA:
        return w + ((state.lambda_a[:, None] * state.a) * state.lambda_b) @ state.b.T
    if kind is AdapterKind.LIDB:
        return w + state.a_aux @ state.a @ state.b_t.T @ state.b_aux
    if kind is AdapterKind.OFT:
        out = np.empty_like(w)
        start = 0
        for rot in _oft_rotations(state):
            stop = start + rot.shape[0]
            out[start:stop] = rot @ w[start:stop]
            start = stop
        return out

    # DoRAVector
    if state.variant == "dora":
        directions = w + state.direction_b @ state.direction_a
        return directions * (state.magnitude / column_norms(directions))
    return (w + column_norms(w) * state.a_prime) * (1.0 + state.b_prime)


def merge(base, state):
    """Fold the adapter into a plain weight matrix (same value as effective_weight)."""

    merged = np.array(effective_weight(base, state))
    merged.setflags(write=True)
    return merged


##############################################################################
# Reverse mode


def backward(base, state, grad_weight):
    """Gradients of the trainable tensors given dL/dW for the effective weight."""

    _check_shape(base, state)
    g = np.asarray(grad_weight, dtype=np.float64)
    if g.shape != state.base_shape:
        raise ShapeError(f"gradient shape {g.shape} does not match base {state.base_shape}")
    kind = state.kind

    if kind in SPECTRAL_KINDS:
        d = as_decomposition(base)
        idx = state.columns.indices
        s = d.s[idx]
        u, v = _tuned_factors(d, state)
        grad_u = g @ v[:, idx] * s
        grad_v = g.T @ u[:, idx] * s
        if kind is AdapterKind.SPECTRAL_A:
            return {"a_u": grad_u, "a_v": grad_v}
        return {"raw_u": cayley_backward(state.raw_u, d.u[:, idx].T @ grad_u),
                "raw_v": cayley_backward(state.raw_v, d.v[:, idx].T @ grad_v)}

    if kind is AdapterKind.SVDIFF:
        d = as_decomposition(base)
        active = (d.s + state.delta_s) > 0
        return {"delta_s": np.einsum("ij,ij->j", d.u, g @ d.v) * active}

    if kind is AdapterKind.LORA:
        return {"a": state.scale * (g @ state.b), "b": state.scale * (g.T @ state.a)}
    if kind is AdapterKind.FULL:
        return {"delta": g.copy()}
    if kind is AdapterKind.VERA:
        core = (state.a * state.lambda_b) @ state.b.T
        return {"lambda_a": np.einsum("ij,ij->i", g, core),
                "lambda_b": np.einsum("ik,ik->k", state.lambda_a[:, None] * state.a, g @ state.b)}
    if kind is AdapterKind.LIDB:
        return {"a": state.a_aux.T @ g @ state.b_aux.T @ state.b_t,
                "b_t": state.b_aux @ g.T @ state.a_aux @ state.a}

    w = as_dense(base)
    if kind is AdapterKind.OFT:
        grads = []
        start = 0
        sizes = oft_block_sizes(state.base_shape[0], state.rank)
        for i, size in enumerate(sizes):
            stop = start + size
            grad_rot = g[start:stop] @ w[start:stop].T
            raw = state.raw[0][:size, :size] if state.shared else state.raw[i]
            grads.append(cayley_backward(raw, grad_rot))
            start = stop
        if not state.shared:
            return {f"raw_{i}": grad for i, grad in enumerate(grads)}
        total = np.zeros_like(state.raw[0])
        for grad in grads:
            total[:grad.shape[0], :grad.shape[0]] += grad
        return {"raw": total}

    # DoRAVector
    if state.variant == "dora":
        directions = w + state.direction_b @ state.direction_a
        norms = column_norms(directions)
        along = np.einsum("ij,ij->j", g, directions) / norms
        grad_dir = (state.magnitude / norms) * (g - directions * (along / norms))
        return {"magnitude": along,
                "direction_b": grad_dir @ state.direction_a.T,
                "direction_a": state.direction_b.T @ grad_dir}
    norms = column_norms(w)
    return {"a_prime": g * (norms * (1.0 + state.b_prime)),
            "b_prime": np.einsum("ij,ij->j", g, w + norms * state.a_prime)}


##############################################################################
# Rotation without re-decomposition


def re_decompose_rotated(base, state):
    """SVD factors of merge(base, state) for a SpectralR state, without new SVD work.

    The singular values are unchanged; the selected columns of u and v are
    rotated in place. The result is flagged non-canonical unless the rotation
    is the identity or the rotated block shares a single singular value (in
    which case it is re-canonicalized).
    """

    if state.kind is not AdapterKind.SPECTRAL_R:
        raise PreconditionError(f"re_decompose_rotated needs a SpectralR state, got {state.kind.value}")
    _check_shape(base, state)
    d = as_decomposition(base)
    rot_u, rot_v = cayley(state.raw_u), cayley(state.raw_v)
    eye = np.eye(state.rank)
    if np.array_equal(rot_u, eye) and np.array_equal(rot_v, eye):
        return d

    u, v = _tuned_factors(d, state)
    rotated = SpectralDecomposition(u, d.s, v, canonical=False)
    block = d.s[state.columns.indices]
    if block.size and np.allclose(block, block[0], rtol=1e-12, atol=0.0):
        return canonicalize(rotated)
    return rotated


##############################################################################
# Parameter budgets

_SCALING = {
    AdapterKind.LORA: ("inf", "(n+m)r ~ n"),
    AdapterKind.SPECTRAL_A: ("n", "(n+m)r ~ n"),
    AdapterKind.SPECTRAL_R: ("n", "2r^2 ~ r"),
    AdapterKind.SVDIFF: ("1", "min(n,m) ~ n"),
    AdapterKind.LIDB: ("inf", "(a+b)r ~ r"),
    AdapterKind.OFT: ("#factors of n", "(n/r)^2 ~ n/r"),
    AdapterKind.VERA: ("inf", "n+r ~ n"),
    AdapterKind.DORA_VECTOR: ("inf", "m+(n+m)r ~ n"),
    AdapterKind.FULL: ("1", "nm ~ n^2"),
}

RANKLESS_KINDS = (AdapterKind.SVDIFF, AdapterKind.FULL)


def trainable_param_count(kind, n, m, rank=1, **extras):
    """Number of trainable scalars for an adapter of `kind` on an n x m weight."""

    kind = AdapterKind(kind)
    if kind in (AdapterKind.LORA, AdapterKind.SPECTRAL_A):
        return (n + m) * rank
    if kind is AdapterKind.SPECTRAL_R:
        return 2 * rank * rank
    if kind is AdapterKind.SVDIFF:
        return min(n, m)
    if kind is AdapterKind.FULL:
        return n * m
    if kind is AdapterKind.LIDB:
        return (extras.get("aux_a", LIDB_DEFAULT_A) + extras.get("aux_b", LIDB_DEFAULT_B)) * rank
    if kind is AdapterKind.VERA:
        return n + rank
    if kind is AdapterKind.OFT:
        sizes = oft_block_sizes(n, rank)
        if extras.get("shared", True):
            return sizes[0] ** 2
        return sum(s * s for s in sizes)
    if extras.get("variant", "dora") == "dora":
        return m + (n + m) * rank
    return n * m + m


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def valid_ranks(kind, n, m, max_rank):
    kind = AdapterKind(kind)
    k = min(n, m)
    if kind in RANKLESS_KINDS:
        return [0]
    if kind is AdapterKind.OFT:
        return _divisors(n)
    if kind in (AdapterKind.LORA, AdapterKind.SPECTRAL_A, AdapterKind.SPECTRAL_R):
        return list(range(1, min(max_rank, k) + 1))
    return list(range(1, max_rank + 1))


def available_budgets(kind, n, m, max_rank, **extras):
    """Sorted distinct trainable-parameter counts reachable by `kind`."""

    counts = {trainable_param_count(kind, n, m, r, **extras) for r in valid_ranks(kind, n, m, max_rank)}
    return sorted(counts)


def budget_table(kinds, n, m, max_rank, **extras):
    """Rows of (kind, rank, count, granularity, scaling) for each valid rank."""

    rows = []
    for kind in kinds:
        kind = AdapterKind(kind)
        granularity, scaling = _SCALING[kind]
        for r in valid_ranks(kind, n, m, max_rank):
            rows.append({
                "kind": kind.value,
                "rank": r,
                "count": trainable_param_count(kind, n, m, r, **extras),
                "granularity": granularity,
                "scaling": scaling,
            })
    return rows


##############################################################################
# DoRA correspondence for vector-form weights


@dataclass(frozen=True, eq=False)
class DoRAMatch:
    magnitude: float
    b: np.ndarray
    a: float


@dataclass(frozen=True, eq=False)
class DoRAMatchReport:
    samples: int
    matched: int
    skipped: int
    max_error: float
    magnitude_error: float


def spectral_vector_output(w0, a_prime, b_prime):
    norm = np.linalg.norm(w0)
    return (w0 / norm + a_prime) * norm * (1.0 + b_prime)


def dora_vector_output(w0, magnitude, b, a):
    direction = w0 + b * a
    return magnitude * direction / np.linalg.norm(direction)


def match_dora_to_spectral(w0, a_prime, b_prime):
    """DoRA parameters reproducing the Spectral^A-vector output for (a', b').

    Sets b*a = |w0| * (w0/|w0| + a') - w0 and magnitude = |w0| (1 + b') |w0/|w0| + a'|.
    Raises PreconditionError when w0/|w0| + a' vanishes.
    """

    w0 = np.asarray(w0, dtype=np.float64)
    norm = np.linalg.norm(w0)
    if norm == 0:
        raise PreconditionError("w0 must be nonzero")
    direction = w0 / norm + a_prime
    length = np.linalg.norm(direction)
    if length == 0:
        raise PreconditionError("degenerate direction: w0/|w0| + a' is zero")
    return DoRAMatch(magnitude=float(norm * (1.0 + b_prime) * length), b=norm * direction - w0, a=1.0)


def dora_spectral_vector_match(w0, samples=100, seed=0, pairs=()):
    """Check the DoRA <-> Spectral^A correspondence on random (a', b') draws.

    Extra explicit (a', b') `pairs` are evaluated after the random ones;
    degenerate directions are skipped and counted.
    """

    w0 = np.asarray(w0, dtype=np.float64)
    if np.linalg.norm(w0) == 0:
        raise PreconditionError("w0 must be nonzero")
    rng = np.random.default_rng(seed)
    draws = [(rng.normal(0.0, 0.5, w0.shape[0]), float(rng.normal(0.0, 0.5))) for _ in range(samples)]
    draws.extend(pairs)

    max_error = magnitude_error = 0.0
    skipped = 0
    norm = np.linalg.norm(w0)
    for a_prime, b_prime in draws:
        try:
            match = match_dora_to_spectral(w0, a_prime, b_prime)
        except PreconditionError:
            skipped += 1
            continue
        target = spectral_vector_output(w0, a_prime, b_prime)
        produced = dora_vector_output(w0, match.magnitude, match.b, match.a)
        max_error = max(max_error, float(np.max(np.abs(target - produced))))
        pure = match_dora_to_spectral(w0, np.zeros_like(w0), b_prime)
        magnitude_error = max(magnitude_error, abs(pure.magnitude - norm * (1.0 + b_prime)))

    report = DoRAMatchReport(samples=len(draws), matched=len(draws) - skipped, skipped=skipped,
                             max_error=max_error, magnitude_error=magnitude_error)
    logger.info("DoRA correspondence: %d matched, %d skipped, max error %.3e",
                report.matched, report.skipped, report.max_error)
    return report
