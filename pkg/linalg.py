"""Dense matrix primitives: thin SVD, numerical rank and subspace geometry.

Every weight matrix in this package is a 2-D float64 numpy array. The SVD is
computed in-repo with a one-sided Jacobi method so that identical input bits
always produce identical output bits, and singular vectors are brought to a
fixed sign convention so serialized factors are reproducible.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from errors import ConvergenceError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

EPS = 2.0 ** -52
MAX_SWEEPS = 60

# floor for the null-column threshold on matrices with subnormal entries
_NULL_NORM = np.finfo(np.float64).tiny / EPS


def as_matrix(value, name="matrix"):
    """Return `value` as a fresh 2-D float64 array with finite entries."""

    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} has non-finite entries")
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


##############################################################################
# Column selection


@dataclass(frozen=True)
class ColumnSelect:
    """A set of singular-vector columns an adapter is allowed to touch.

    Contiguous selections are `start`/`count`; sampled selections carry the
    explicit sorted index tuple in `explicit` (start/count then describe its
    first element and size).
    """

    start: int
    count: int
    explicit: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.start < 0 or self.count < 0:
            raise PreconditionError(f"invalid column selection start={self.start} count={self.count}")
        if self.explicit is not None:
            if len(set(self.explicit)) != len(self.explicit) or len(self.explicit) != self.count:
                raise PreconditionError(f"explicit columns must be distinct, got {self.explicit}")
            if any(i < 0 for i in self.explicit):
                raise PreconditionError(f"negative column index in {self.explicit}")

    @classmethod
    def top(cls, r):
        return cls(0, r)

    @classmethod
    def bottom(cls, r, k):
        return cls(k - r, r)

    @classmethod
    def block(cls, i, r):
        return cls(i * r, r)

    @classmethod
    def from_indices(cls, indices):
        idx = tuple(sorted(int(i) for i in indices))
        return cls(idx[0] if idx else 0, len(idx), idx)

    @property
    def indices(self):
        if self.explicit is not None:
            return np.array(self.explicit, dtype=np.intp)
        return np.arange(self.start, self.start + self.count, dtype=np.intp)

    @property
    def stop(self):
        return int(self.indices.max()) + 1 if self.count else self.start

    def check(self, k):
        """Raise unless every selected column exists among `k` columns."""

        if self.stop > k:
            raise ShapeError(f"columns {self.describe()} exceed the {k} available singular vectors")

    def overlap(self, other):
        return len(set(self.indices.tolist()) & set(other.indices.tolist()))

    def describe(self):
        if self.explicit is not None:
            return "{" + ",".join(str(i) for i in self.explicit) + "}"
        return f"[{self.start},{self.start + self.count})"

    def to_dict(self):
        if self.explicit is not None:
            return {"indices": list(self.explicit)}
        return {"start": self.start, "count": self.count}

    @classmethod
    def from_dict(cls, data):
        if "indices" in data:
            return cls.from_indices(data["indices"])
        return cls(int(data["start"]), int(data["count"]))


##############################################################################
# Spectral decomposition


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Thin SVD triple with W = u @ diag(s) @ v.T.

    `canonical` is False when the factors are valid but have not been put
    through `canonicalize` (for example after an in-place rotation).
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    canonical: bool = True

    def __post_init__(self):
        u, s, v = _frozen(self.u), _frozen(self.s), _frozen(self.v)
        if u.ndim != 2 or v.ndim != 2 or s.ndim != 1:
            raise ShapeError("decomposition needs 2-D u, v and 1-D s")
        if not (u.shape[1] == s.shape[0] == v.shape[1]):
            raise ShapeError(f"inconsistent factor shapes u{u.shape} s{s.shape} v{v.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "v", v)

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    @property
    def k(self):
        return self.s.shape[0]

    def columns(self, select):
        """Return (u, s, v) restricted to the selected columns."""

        select.check(self.k)
        idx = select.indices
        return self.u[:, idx], self.s[idx], self.v[:, idx]


def _round_robin(q):
    """Pairings that visit every column pair once, n/2 disjoint pairs per round."""

    players = list(range(q)) + ([-1] if q % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            left, right = zip(*pairs)
            rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _rotate_pairs(g, v, left, right, tol, null_sq):
    gi, gj = g[:, left], g[:, right]
    alpha = np.einsum("ij,ij->j", gi, gi)
    beta = np.einsum("ij,ij->j", gj, gj)
    gamma = np.einsum("ij,ij->j", gi, gj)

    # a column at rounding-noise level can never be made relatively orthogonal
    # to a large one, so pairs touching it count as converged
    active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > null_sq)
    if not active.any():
        return 0

    left, right = left[active], right[active]
    alpha, beta, gamma = alpha[active], beta[active], gamma[active]
    zeta = (beta - alpha) / (2.0 * gamma)
    t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    sn = c * t

    for mat in (g, v):
        a, b = mat[:, left], mat[:, right]
        mat[:, left] = c * a - sn * b
        mat[:, right] = sn * a + c * b
    return int(active.sum())


def _one_sided_jacobi(a, dims):
    """SVD of a tall matrix `a` (rows >= cols) by orthogonalizing its columns."""

    p, q = a.shape
    g = a.copy()
    v = np.eye(q)
    tol = EPS * p
    null_norm = max(EPS * np.linalg.norm(a) * np.sqrt(p), _NULL_NORM)
    null_sq = null_norm * null_norm
    rounds = _round_robin(q)

    for sweep in range(MAX_SWEEPS):
        rotated = sum(_rotate_pairs(g, v, left, right, tol, null_sq) for left, right in rounds)
        if not rotated:
            logger.debug("Jacobi SVD of %dx%d converged after %d sweeps", dims[0], dims[1], sweep + 1)
            break
    else:
        raise ConvergenceError(
            f"SVD of {dims[0]}x{dims[1]} matrix did not converge after {MAX_SWEEPS} sweeps")

    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s, g, v = s[order], g[:, order], v[:, order]

    null = s <= null_norm
    u = np.zeros_like(g)
    u[:, ~null] = g[:, ~null] / s[~null]
    s[null] = 0.0
    if null.any():
        u = _complete_basis(u, ~null)
    return u, s, v


def _complete_basis(u, filled):
    """Fill the unfilled columns of `u` with an orthonormal complement."""

    p = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(filled)]
    candidates = iter(range(p))
    for j in np.flatnonzero(~filled):
        for i in candidates:
            vec = np.zeros(p)
            vec[i] = 1.0
            for _ in range(2):
                for b in basis:
                    vec -= (b @ vec) * b
            norm = np.linalg.norm(vec)
            if norm > 0.5:
                vec /= norm
                basis.append(vec)
                u[:, j] = vec
                break
    return u


def svd_thin(w):
    """Canonical thin SVD of `w`.

    Returns a decomposition with k = min(rows, cols) singular triples, singular
    values non-increasing. Raises `ConvergenceError` naming the matrix
    dimensions if the Jacobi sweeps hit `MAX_SWEEPS`.
    """

    w = as_matrix(w)
    n, m = w.shape
    if n >= m:
        u, s, v = _one_sided_jacobi(w, (n, m))
    else:
        v, s, u = _one_sided_jacobi(w.T.copy(), (n, m))
    return canonicalize(SpectralDecomposition(u, s, v, canonical=False))


def canonicalize(d):
    """Flip column signs so each u column's largest-magnitude entry is nonnegative.

    Ties go to the lowest row index; v columns flip in tandem.
    """

    u, v = d.u.copy(), d.v.copy()
    if d.k:
        pivot = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[pivot, np.arange(d.k)] < 0, -1.0, 1.0)
        u *= signs
        v *= signs
    return SpectralDecomposition(u, d.s, v, canonical=True)


def reconstruct(d):
    return (d.u * d.s) @ d.v.T


def randomized_svd(w, rank, oversample=10, power_iterations=2, seed=0):
    """Truncated SVD from a Gaussian range finder.

    Only the leading `rank` triples are returned. The small projected matrix is
    decomposed with `svd_thin`, so the result is canonical.
    """

    w = as_matrix(w)
    n, m = w.shape
    if not 1 <= rank <= min(n, m):
        raise PreconditionError(f"rank must be in [1, {min(n, m)}], got {rank}")

    rng = np.random.default_rng(seed)
    width = min(rank + oversample, min(n, m))
    q, _ = np.linalg.qr(w @ rng.standard_normal((m, width)))
    for _ in range(power_iterations):
        q, _ = np.linalg.qr(w.T @ q)
        q, _ = np.linalg.qr(w @ q)

    small = svd_thin(q.T @ w)
    u = q @ small.u[:, :rank]
    return canonicalize(SpectralDecomposition(u, small.s[:rank], small.v[:, :rank], canonical=False))


def fingerprint(d):
    """Stable hex digest identifying a decomposition's exact bits."""

    digest = hashlib.sha256()
    digest.update(np.array(d.shape + (d.k,), dtype="<i8").tobytes())
    for arr in (d.u, d.s, d.v):
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()


##############################################################################
# Rank and subspace geometry


def numerical_rank(w, tol=None):
    s = svd_thin(w).s
    if tol is None:
        tol = max(np.shape(w)) * s[0] * EPS
    return int(np.count_nonzero(s > tol))


def orthogonality_defect(m):
    """Frobenius norm of m.T @ m - I for a square or tall matrix."""

    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ShapeError(f"orthogonality defect needs a square or tall matrix, got {m.shape}")
    return float(np.linalg.norm(m.T @ m - np.eye(m.shape[1])))


def principal_angles(a, b):
    """Canonical angles (radians, non-decreasing) between span(a) and span(b)."""

    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"subspaces live in different dimensions: {a.shape[0]} vs {b.shape[0]}")
    for name, basis in (("a", a), ("b", b)):
        defect = orthogonality_defect(basis)
        if defect > 1e-8:
            raise PreconditionError(f"{name} does not have orthonormal columns (defect {defect:.3e})")

    cosines = np.clip(svd_thin(a.T @ b).s, 0.0, 1.0)
    return np.arccos(cosines)


def random_orthonormal(rng, n, k):
    """An n x k matrix with orthonormal columns drawn from `rng`."""

    q, r = np.linalg.qr(rng.standard_normal((n, k)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)
