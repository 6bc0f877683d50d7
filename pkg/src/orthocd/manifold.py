"""Geometry of the orthogonal group O(d) under the Frobenius metric.

A point is a d x d matrix W with W^T W = I.  The tangent space at W is
{W @ Omega : Omega skew-symmetric}, a linear space of dimension
D = d(d-1)/2.  An orthonormal basis of the skew-symmetric matrices is

    H[j,l] = (e_j e_l^T - e_l e_j^T) / sqrt(2),   1 <= j < l <= d,

and eta_i = W @ H[j,l] is the corresponding orthonormal tangent basis at
W.  Basis elements are enumerated row-major over pairs (j, l):

    i = sum_{k=1}^{j-1} (d - k) + (l - j),   i in {1, ..., D}.

Coordinate indices i and column indices (j, l) are 1-based throughout the
public API; columns of numpy arrays are addressed 0-based internally.

Moving along a single basis direction has a closed form: the geodesic
Exp_W(theta * eta_i) right-multiplies W by a planar rotation of the
column pair (j, l).  Because H carries the 1/sqrt(2) normalization, a
coordinate step of size theta rotates the plane by theta / sqrt(2).
`givens_update` implements that rotation touching only the two affected
columns (about 6d flops), and is exactly `exp_map` restricted to one
coordinate; the equivalence is part of the test suite.

All computations are in float64.  Functions are pure unless an explicit
`out=` argument requests in-place mutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "OrthogonalMatrix",
    "TangentVector",
    "TangentCoordinate",
    "SkewBasis",
    "all_partials",
    "basis_tangent",
    "coord_index",
    "coord_pair",
    "exp_map",
    "flops",
    "givens_update",
    "matrix_expm",
    "metric",
    "norm",
    "num_coords",
    "orthogonality_defect",
    "partial_derivative",
    "random_orthogonal",
    "reorthogonalize",
    "skew_basis",
    "tangent_project",
]

_SQRT2 = math.sqrt(2.0)

ORTHOGONALITY_TOL = 1e-8
DET_TOL = 1e-6
TANGENCY_TOL = 1e-12


class FlopCounter:
    """Cheap per-operation flop bookkeeping for the cost-model tests.

    Counts are analytic estimates (e.g. 6d for a Givens update, matmul
    as 2d^3), not hardware counters.  Always on; the overhead is one
    dict update per geometry call.
    """

    def __init__(self) -> None:
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    def total(self) -> int:
        return sum(self.by_op.values())

    def reset(self) -> None:
        self.by_op.clear()


flops = FlopCounter()


# ---------------------------------------------------------------------------
# validated containers
# ---------------------------------------------------------------------------

def orthogonality_defect(w: np.ndarray) -> float:
    """Frobenius norm of W^T W - I."""
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    return float(np.linalg.norm(w.T @ w - np.eye(d)))


def _check_square(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {w.shape}")
    return w


@dataclass(frozen=True)
class OrthogonalMatrix:
    """A validated point on O(d).

    Construction rejects matrices whose orthogonality defect exceeds
    ORTHOGONALITY_TOL or whose determinant is not +-1 within DET_TOL.
    Both components of O(d) are accepted (det = -1 is a valid point);
    no operation in this module ever switches component.
    """

    m: np.ndarray

    def __post_init__(self) -> None:
        w = _check_square(self.m)
        object.__setattr__(self, "m", w)
        defect = orthogonality_defect(w)
        if defect > ORTHOGONALITY_TOL:
            raise ValueError(
                f"not orthogonal: ||W^T W - I||_F = {defect:.3e} "
                f"> {ORTHOGONALITY_TOL:.0e}"
            )
        # |det| = 1 checked through slogdet; |log|det|| <= tol is the
        # first-order equivalent of ||det| - 1| <= tol
        _, logabsdet = np.linalg.slogdet(w)
        if abs(logabsdet) > DET_TOL:
            raise ValueError(f"|det W| deviates from 1: log|det| = {logabsdet:.3e}")

    @property
    def d(self) -> int:
        return self.m.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.m.astype(dtype)
        return self.m


@dataclass(frozen=True)
class TangentVector:
    """A tangent vector xi at base point W, stored densely.

    Validates W^T xi skew-symmetric to TANGENCY_TOL * max(1, ||xi||_F).
    """

    base: np.ndarray
    value: np.ndarray

    def __post_init__(self) -> None:
        base = _check_square(np.asarray(self.base, dtype=np.float64))
        value = np.asarray(self.value, dtype=np.float64)
        if value.shape != base.shape:
            raise ValueError("tangent value shape differs from base shape")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "value", value)
        omega = base.T @ value
        defect = float(np.linalg.norm(omega + omega.T))
        scale = max(1.0, float(np.linalg.norm(value)))
        if defect > TANGENCY_TOL * scale:
            raise ValueError(
                f"not tangent at base: ||W^T xi + (W^T xi)^T||_F = {defect:.3e}"
            )

    @property
    def d(self) -> int:
        return self.base.shape[0]


@dataclass(frozen=True)
class TangentCoordinate:
    """A coordinate index paired with a magnitude theta along eta_i."""

    index: int
    theta: float

    def densify(self, w: np.ndarray) -> TangentVector:
        eta = basis_tangent(w, self.index)
        return TangentVector(eta.base, self.theta * eta.value)


# ---------------------------------------------------------------------------
# coordinate indexing
# ---------------------------------------------------------------------------

def num_coords(d: int) -> int:
    """Dimension D = d(d-1)/2 of the tangent space."""
    if d < 1:
        raise ValueError("d must be positive")
    return d * (d - 1) // 2


def coord_index(j: int, l: int, d: int) -> int:
    """Map a column pair 1 <= j < l <= d to its coordinate i in {1..D}."""
    if not (1 <= j < l <= d):
        raise ValueError(f"need 1 <= j < l <= d, got (j, l, d) = ({j}, {l}, {d})")
    return (j - 1) * d - j * (j - 1) // 2 + (l - j)


def coord_pair(i: int, d: int) -> tuple[int, int]:
    """Inverse of coord_index: coordinate i in {1..D} to its pair (j, l)."""
    D = num_coords(d)
    if not (1 <= i <= D):
        raise ValueError(f"coordinate {i} out of range 1..{D} for d={d}")
    # 0-based row a solves a*d - a(a+1)/2 <= i-1 < (a+1)*d - (a+1)(a+2)/2;
    # the quadratic is solved exactly with integer isqrt, then clamped
    i0 = i - 1
    a = (2 * d - 1 - math.isqrt((2 * d - 1) ** 2 - 8 * i0)) // 2
    while a * d - a * (a + 1) // 2 > i0:
        a -= 1
    while (a + 1) * d - (a + 1) * (a + 2) // 2 <= i0:
        a += 1
    b = i0 - (a * d - a * (a + 1) // 2) + a + 1
    return a + 1, b + 1


@dataclass(frozen=True)
class SkewBasis:
    """Sparse representation of H[j,l]: two entries, +-1/sqrt(2).

    Entry (j, l) holds +1/sqrt(2) and (l, j) holds -1/sqrt(2).  The
    dense form exists for tests and diagnostics only; optimizer code
    paths never materialize it.
    """

    j: int
    l: int
    d: int
    value: float = 1.0 / _SQRT2

    def dense(self) -> np.ndarray:
        h = np.zeros((self.d, self.d))
        h[self.j - 1, self.l - 1] = self.value
        h[self.l - 1, self.j - 1] = -self.value
        return h


def skew_basis(j: int, l: int, d: int) -> SkewBasis:
    """Normalized skew-symmetric basis element H[j,l] in sparse form."""
    if not (1 <= j < l <= d):
        raise ValueError(f"need 1 <= j < l <= d, got (j, l, d) = ({j}, {l}, {d})")
    return SkewBasis(j, l, d)


def basis_tangent(w: np.ndarray, i: int) -> TangentVector:
    """Dense tangent basis element eta_i = W @ H[j,l] at W.

    Only columns j and l of the result are nonzero:
    eta[:, l] = W[:, j]/sqrt(2) and eta[:, j] = -W[:, l]/sqrt(2).
    Intended for tests; O(d^2) allocation.
    """
    w = _check_square(w)
    d = w.shape[0]
    j, l = coord_pair(i, d)
    eta = np.zeros_like(w)
    eta[:, l - 1] = w[:, j - 1] / _SQRT2
    eta[:, j - 1] = -w[:, l - 1] / _SQRT2
    return TangentVector(w, eta)


# ---------------------------------------------------------------------------
# projection and partial derivatives
# ---------------------------------------------------------------------------

def tangent_project(w: np.ndarray, m: np.ndarray) -> TangentVector:
    """Orthogonal projection of an ambient matrix M onto the tangent
    space at W:  P(M) = W (W^T M - M^T W) / 2."""
    w = _check_square(w)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != w.shape:
        raise ValueError(f"shape mismatch: W is {w.shape}, M is {m.shape}")
    d = w.shape[0]
    a = w.T @ m
    value = w @ ((a - a.T) / 2.0)
    flops.add("tangent_project", 4 * d**3 + 2 * d**2)
    return TangentVector(w, value)


def partial_derivative(w: np.ndarray, g: np.ndarray, i: int) -> float:
    """Riemannian partial derivative along eta_i from the Euclidean
    gradient G, in O(d):

        v_i = ((W^T G)[j,l] - (W^T G)[l,j]) / sqrt(2)
            = (W[:,j].G[:,l] - W[:,l].G[:,j]) / sqrt(2)

    Only columns j and l of W and G are read.
    """
    d = w.shape[0]
    j, l = coord_pair(i, d)
    j0, l0 = j - 1, l - 1
    v = (w[:, j0] @ g[:, l0] - w[:, l0] @ g[:, j0]) / _SQRT2
    flops.add("partial_derivative", 4 * d)
    return float(v)


_TRIU_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _triu_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    idx = _TRIU_CACHE.get(d)
    if idx is None:
        idx = np.triu_indices(d, k=1)
        _TRIU_CACHE[d] = idx
    return idx


def all_partials(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """All D Riemannian partial derivatives as a vector, coordinate i at
    position i-1.  Computed once through A = W^T G; the row-major upper
    triangle of (A - A^T)/sqrt(2) matches the coord_index enumeration.
    """
    w = _check_square(w)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != w.shape:
        raise ValueError(f"shape mismatch: W is {w.shape}, G is {g.shape}")
    d = w.shape[0]
    a = w.T @ g
    rows, cols = _triu_indices(d)
    v = (a[rows, cols] - a[cols, rows]) / _SQRT2
    flops.add("all_partials", 2 * d**3 + d**2)
    return v


# ---------------------------------------------------------------------------
# exponential map and Givens shortcut
# ---------------------------------------------------------------------------

def matrix_expm(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Matrix exponential of a skew-symmetric matrix.

    Backed by scipy's scaling-and-squaring Pade implementation; the
    test suite validates it against an independent truncated-Taylor
    oracle.  Rejects inputs whose symmetric part exceeds `tol` in
    Frobenius norm, then exponentiates the exactly skew (A - A^T)/2.
    """
    a = _check_square(a)
    defect = float(np.linalg.norm(a + a.T))
    if defect > tol:
        raise ValueError(f"input not skew-symmetric: ||A + A^T||_F = {defect:.3e}")
    d = a.shape[0]
    s = (a - a.T) / 2.0  # exact for skew input, repairs rounding otherwise
    flops.add("matrix_expm", 26 * d**3)  # Pade-13 estimate: ~13 matmul equivalents
    return scipy.linalg.expm(s)


def exp_map(w: np.ndarray, xi: TangentVector | np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Geodesic step Exp_W(xi) = W @ expm(W^T xi).

    `xi` is a TangentVector at W or a raw ambient matrix; tangency is
    validated either way (defect above tol * max(1, ||xi||) raises).
    """
    w = _check_square(w)
    if isinstance(xi, TangentVector):
        if not np.array_equal(xi.base, w):
            raise ValueError("tangent vector is based at a different point")
        xi = xi.value
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != w.shape:
        raise ValueError(f"shape mismatch: W is {w.shape}, xi is {xi.shape}")
    d = w.shape[0]
    omega = w.T @ xi
    defect = float(np.linalg.norm(omega + omega.T))
    scale = max(1.0, float(np.linalg.norm(xi)))
    if defect > tol * scale:
        raise ValueError(
            f"xi is not tangent at W: ||W^T xi + (W^T xi)^T||_F = {defect:.3e}"
        )
    flops.add("exp_map", 4 * d**3)  # W^T xi and the final product
    return w @ matrix_expm((omega - omega.T) / 2.0)


def givens_update(
    w: np.ndarray,
    i: int,
    theta: float,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Coordinate geodesic step: exactly exp_map(W, theta * eta_i), as a
    planar rotation of columns j and l by angle theta / sqrt(2).

    Cost is about 6d flops and only the two columns are read or
    written.  With `out=None` the remaining columns are copied into a
    fresh array; pass `out=w` to update W in place (the optimizer hot
    path, keeping the O(d) per-step cost real).
    """
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    j, l = coord_pair(i, d)
    j0, l0 = j - 1, l - 1
    ang = theta / _SQRT2
    c = math.cos(ang)
    s = math.sin(ang)
    wj = w[:, j0].copy()
    wl = w[:, l0].copy()
    if out is None:
        out = w.copy()
    elif out is not w:
        out[...] = w
    # right-multiplication by the rotation with entries
    # [jj, jl; lj, ll] = [cos, sin; -sin, cos]
    out[:, j0] = c * wj - s * wl
    out[:, l0] = s * wj + c * wl
    flops.add("givens_update", 6 * d)
    return out


# ---------------------------------------------------------------------------
# metric, norm, repair
# ---------------------------------------------------------------------------

def metric(xi: TangentVector, zeta: TangentVector) -> float:
    """Frobenius inner product tr(xi^T zeta) of tangents at a shared base."""
    if not np.array_equal(xi.base, zeta.base):
        raise ValueError("tangent vectors are based at different points")
    return float(np.vdot(xi.value, zeta.value))


def norm(xi: TangentVector) -> float:
    return float(np.linalg.norm(xi.value))


def reorthogonalize(w: np.ndarray) -> np.ndarray:
    """Repair accumulated drift: QR with the sign of diag(R) fixed to +1
    (making the factor unique), then Newton-Schulz polish iterations
    until the defect reaches 1e-14 or the f64 floor for that dimension.

    Inputs with defect above 0.5 signal upstream corruption and raise.
    """
    w = _check_square(w)
    d = w.shape[0]
    defect = orthogonality_defect(w)
    if defect > 0.5:
        raise ValueError(
            f"gross non-orthogonality (defect {defect:.3e} > 0.5); refusing to repair"
        )
    q, r = np.linalg.qr(w)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    eye = np.eye(d)
    for _ in range(2):
        if orthogonality_defect(q) <= 1e-14:
            break
        q = q @ (1.5 * eye - 0.5 * (q.T @ q))
    return q


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed random orthogonal matrix (QR with sign fix)."""
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
