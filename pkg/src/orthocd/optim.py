"""Stochastic Riemannian optimizers on O(d).

Both algorithms share the update for the unconstrained blocks,
X <- X - alpha * g_X.  They differ on the orthogonal block:

  srgd_step: full tangent step, W <- Exp_W(-alpha * P(g_W)), one matrix
      exponential per iteration (O(d^3));
  srcd_step: one (or a block of) Riemannian partial derivative(s)
      theta_i = <P(g_W), eta_i>, applied as Givens column rotations,
      W <- givens_update(W, i, -alpha * theta_i) (O(d) per coordinate).

Coordinate choice is uniform i.i.d., Gauss-Southwell (largest
|partial|), or block Gauss-Southwell with optionally column-disjoint
pairs.  A plain Euclidean `sgd_step` (no orthogonality enforcement) is
included as the unconstrained baseline.

States mutate their parameter arrays in place and are single-owner.
All steps raise NumericError on non-finite gradients rather than let
NaNs propagate into the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import manifold

__all__ = [
    "GradPack",
    "NumericError",
    "OptimizerState",
    "SelectionRule",
    "StepSchedule",
    "SyntheticProblem",
    "apply_block",
    "schedule_step",
    "select_block_gs",
    "select_gauss_southwell",
    "select_uniform",
    "sgd_step",
    "srcd_step",
    "srgd_step",
]


class NumericError(RuntimeError):
    """Raised when a step encounters non-finite values."""


@dataclass(frozen=True)
class StepSchedule:
    """Stepsize sequence: fixed alpha0, or polynomial decay
    alpha0 / (1 + k/k0)^p.

    With robbins_monro=True the schedule must be polynomial with
    p in (0.5, 1], which makes sum(alpha) diverge while sum(alpha^2)
    converges (any offset k0 > 0 preserves both).
    """

    kind: str = "fixed"
    alpha0: float = 2e-4
    power: float = 1.0
    offset: float = 1.0  # k0
    robbins_monro: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "polynomial"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (self.alpha0 > 0 and math.isfinite(self.alpha0)):
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")
        if self.offset <= 0:
            raise ValueError(f"offset k0 must be positive, got {self.offset}")
        if self.kind == "polynomial" and self.power <= 0:
            raise ValueError(f"power must be positive, got {self.power}")
        if self.robbins_monro:
            if self.kind != "polynomial":
                raise ValueError("robbins_monro requires a polynomial schedule")
            if not (0.5 < self.power <= 1.0):
                raise ValueError(
                    f"robbins_monro requires power in (0.5, 1], got {self.power}")


def schedule_step(schedule: StepSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("iteration index must be >= 0")
    if schedule.kind == "fixed":
        return schedule.alpha0
    return schedule.alpha0 / (1.0 + k / schedule.offset) ** schedule.power


@dataclass(frozen=True)
class SelectionRule:
    kind: str = "uniform"
    block_fraction: float = 0.005  # block_gs only
    disjoint: bool = True          # block_gs only

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "gauss_southwell", "block_gs"):
            raise ValueError(f"unknown selection rule {self.kind!r}")
        if not (0.0 < self.block_fraction <= 1.0):
            raise ValueError(f"block_fraction must be in (0, 1], got {self.block_fraction}")

    def block_size(self, n_coords: int) -> int:
        return max(1, round(self.block_fraction * n_coords))


@dataclass
class GradPack:
    """Gradient bundle for the generic steps: Euclidean gradient of the
    orthogonal block plus named unconstrained blocks.  rnn.Grads is
    duck-compatible (same .w attribute and .x_blocks() method)."""

    w: np.ndarray
    x: dict[str, np.ndarray] = field(default_factory=dict)

    def x_blocks(self) -> dict[str, np.ndarray]:
        return self.x


@dataclass
class OptimizerState:
    """Single-owner optimizer state.

    `w` and the arrays in `x` are mutated in place, so a state built
    with for_rnn() updates the RnnParams it was built from.  `rng`
    drives uniform coordinate selection only.  `reorth_every` is the
    SRGD drift policy (QR repair every so many steps, None disables);
    srcd_step never reorthogonalizes, Givens products stay orthogonal
    to rounding on their own.
    """

    w: np.ndarray
    x: dict[str, np.ndarray]
    schedule: StepSchedule
    rule: SelectionRule | None = None
    k: int = 0
    rng: np.random.Generator | None = None
    reorth_every: int | None = 1000
    last_coords: tuple[int, ...] = ()

    @classmethod
    def for_rnn(cls, params, schedule: StepSchedule,
                rule: SelectionRule | None = None,
                seed: int | None = None,
                reorth_every: int | None = 1000) -> "OptimizerState":
        return cls(w=params.w, x=params.x_blocks(), schedule=schedule,
                   rule=rule, rng=np.random.default_rng(seed),
                   reorth_every=reorth_every)


def _check_finite(grads) -> None:
    if not np.all(np.isfinite(grads.w)):
        raise NumericError("non-finite entries in the W gradient")
    for name, g in grads.x_blocks().items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite entries in gradient block {name!r}")


def _update_x(state: OptimizerState, grads, alpha: float) -> None:
    # identical unconstrained update in every optimizer, shared on purpose
    blocks = grads.x_blocks()
    for name, arr in state.x.items():
        arr -= alpha * blocks[name]


def sgd_step(state: OptimizerState, grads) -> OptimizerState:
    """Euclidean SGD on all blocks; W leaves the manifold (baseline)."""
    alpha = schedule_step(state.schedule, state.k)
    _check_finite(grads)
    _update_x(state, grads, alpha)
    state.w -= alpha * grads.w
    state.k += 1
    return state


def srgd_step(state: OptimizerState, grads) -> OptimizerState:
    """Full Riemannian step: W <- Exp_W(-alpha * P(g_W)).

    Exp_W(W S) = W expm(S) for skew S, so the update multiplies W by
    expm(-alpha * skew(W^T g_W)) directly.
    """
    alpha = schedule_step(state.schedule, state.k)
    _check_finite(grads)
    _update_x(state, grads, alpha)
    w = state.w
    d = w.shape[0]
    a = w.T @ grads.w
    skew = (a - a.T) / 2.0
    manifold.flops.add("srgd_w_update", 4 * d**3)
    w[...] = w @ manifold.matrix_expm(-alpha * skew)
    state.k += 1
    if state.reorth_every and state.k % state.reorth_every == 0:
        w[...] = manifold.reorthogonalize(w)
    return state


def srcd_step(state: OptimizerState, grads) -> OptimizerState:
    """Coordinate step per the state's selection rule.

    The W update reads and writes only the affected column pairs.  With
    the uniform rule the whole W path is O(d): one partial derivative
    from two columns, one Givens rotation.
    """
    if state.rule is None:
        raise ValueError("srcd_step needs a SelectionRule on the state")
    alpha = schedule_step(state.schedule, state.k)
    _check_finite(grads)
    _update_x(state, grads, alpha)
    w = state.w
    d = w.shape[0]
    n_coords = manifold.num_coords(d)
    rule = state.rule
    if rule.kind == "uniform":
        if state.rng is None:
            raise ValueError("uniform selection needs an rng on the state")
        i = select_uniform(state.rng, n_coords)
        theta = manifold.partial_derivative(w, grads.w, i)
        manifold.givens_update(w, i, -alpha * theta, out=w)
        state.last_coords = (i,)
    elif rule.kind == "gauss_southwell":
        v = manifold.all_partials(w, grads.w)
        i = select_gauss_southwell(v)
        manifold.givens_update(w, i, -alpha * v[i - 1], out=w)
        state.last_coords = (i,)
    else:  # block_gs
        v = manifold.all_partials(w, grads.w)
        coords = select_block_gs(v, rule.block_size(n_coords), d,
                                 disjoint=rule.disjoint)
        thetas = [-alpha * v[i - 1] for i in coords]
        apply_block(w, coords, thetas, disjoint=rule.disjoint, out=w)
        state.last_coords = tuple(coords)
    state.k += 1
    return state


# ---------------------------------------------------------------------------
# coordinate selection
# ---------------------------------------------------------------------------

def select_uniform(rng: np.random.Generator, n_coords: int) -> int:
    """One i.i.d. uniform coordinate from {1, ..., n_coords}."""
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    return int(rng.integers(1, n_coords + 1))


def select_gauss_southwell(partials: np.ndarray) -> int:
    """argmax_i |v_i|, 1-based; ties go to the smallest index."""
    v = np.asarray(partials)
    if v.size == 0:
        raise ValueError("empty partials vector")
    return int(np.argmax(np.abs(v))) + 1


def select_block_gs(partials: np.ndarray, block_size: int, d: int,
                    disjoint: bool = True) -> list[int]:
    """Top coordinates by |v_i|, in descending order.

    With disjoint=True, coordinates sharing a column with an earlier
    pick are skipped (at most floor(d/2) disjoint pairs exist), so the
    result may be shorter than block_size.
    """
    v = np.asarray(partials)
    if not (1 <= block_size <= v.size):
        raise ValueError(f"block_size {block_size} out of range 1..{v.size}")
    order = np.argsort(-np.abs(v), kind="stable")
    if not disjoint:
        return [int(i) + 1 for i in order[:block_size]]
    chosen: list[int] = []
    used = np.zeros(d + 1, dtype=bool)
    for i0 in order:
        j, l = manifold.coord_pair(int(i0) + 1, d)
        if used[j] or used[l]:
            continue
        used[j] = used[l] = True
        chosen.append(int(i0) + 1)
        if len(chosen) == block_size:
            break
    return chosen


def apply_block(w: np.ndarray, coords, thetas, disjoint: bool = True,
                out: np.ndarray | None = None) -> np.ndarray:
    """Apply a block of coordinate steps.

    disjoint=True composes sequential Givens rotations (order does not
    matter, the pairs commute; overlapping pairs raise).  disjoint=False
    takes a single geodesic step along sum_i theta_i eta_i, through the
    dense matrix exponential.
    """
    coords = list(coords)
    thetas = list(thetas)
    if len(coords) != len(thetas):
        raise ValueError("coords and thetas differ in length")
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    if disjoint:
        pairs = [manifold.coord_pair(i, d) for i in coords]
        cols = [c for p in pairs for c in p]
        if len(set(cols)) != len(cols):
            raise ValueError("overlapping column pairs with disjoint=True")
        if out is None:
            out = w.copy()
        elif out is not w:
            out[...] = w
        for i, theta in zip(coords, thetas):
            manifold.givens_update(out, i, theta, out=out)
        return out
    # single exponential of the summed tangent direction:
    # Exp_W(sum theta_i W H_i) = W expm(sum theta_i H_i)
    omega = np.zeros((d, d))
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for i, theta in zip(coords, thetas):
        j, l = manifold.coord_pair(i, d)
        omega[j - 1, l - 1] += theta * inv_sqrt2
        omega[l - 1, j - 1] -= theta * inv_sqrt2
    result = w @ manifold.matrix_expm(omega)
    if out is None:
        return result
    out[...] = result
    return out


# ---------------------------------------------------------------------------
# synthetic problem for the convergence harness
# ---------------------------------------------------------------------------

@dataclass
class SyntheticProblem:
    """f(X, W) = 0.5*||W A - B||_F^2 + 0.5*||X - C||_F^2 with B = Q A
    for an orthogonal Q, so the W part has a known minimizer and the
    whole objective is quadratic: L-smooth with
    L = max(sigma_max(A)^2, 1).

    The stochastic gradient oracle returns the exact Euclidean gradient
    plus i.i.d. N(0, noise_std^2) entries.  After tangent projection
    the W noise keeps mean zero and per-coordinate variance noise_std^2,
    so the standard stochastic-approximation assumptions hold by
    construction (unbiased, bounded second moment).
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    q: np.ndarray
    noise_std: float = 0.0

    @classmethod
    def make(cls, d: int, x_shape: tuple[int, int] = (4, 4),
             noise_std: float = 0.0, seed: int = 0) -> "SyntheticProblem":
        rng = np.random.default_rng(seed)
        # well-conditioned A with sigma_max = 1, so L = 1
        u = manifold.random_orthogonal(d, rng)
        v = manifold.random_orthogonal(d, rng)
        svals = np.linspace(0.5, 1.0, d)
        a = u @ np.diag(svals) @ v.T
        q = manifold.random_orthogonal(d, rng)
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        c = rng.standard_normal(x_shape)
        return cls(a=a, b=q @ a, c=c, q=q, noise_std=noise_std)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def lipschitz(self) -> float:
        return max(np.linalg.svd(self.a, compute_uv=False)[0] ** 2, 1.0)

    def init(self, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal(self.c.shape)
        w0 = manifold.random_orthogonal(self.d, rng)
        if np.linalg.det(w0) < 0:
            w0[:, 0] = -w0[:, 0]
        return x0, w0

    def loss(self, x: np.ndarray, w: np.ndarray) -> float:
        return 0.5 * float(np.linalg.norm(w @ self.a - self.b) ** 2
                           + np.linalg.norm(x - self.c) ** 2)

    def grads(self, x: np.ndarray, w: np.ndarray,
              rng: np.random.Generator | None = None) -> GradPack:
        """Euclidean gradients; pass an rng to add the noise."""
        g_w = (w @ self.a - self.b) @ self.a.T
        g_x = x - self.c
        if rng is not None and self.noise_std > 0.0:
            g_w = g_w + rng.normal(0.0, self.noise_std, size=g_w.shape)
            g_x = g_x + rng.normal(0.0, self.noise_std, size=g_x.shape)
        return GradPack(w=g_w, x={"x": g_x})

    def grad_norm_sq(self, x: np.ndarray, w: np.ndarray) -> float:
        """Exact squared Riemannian gradient norm ||g_X||^2 + ||g_W||^2,
        the quantity whose weighted average the convergence guarantee
        bounds (W part via Parseval over the coordinate partials)."""
        g_w = (w @ self.a - self.b) @ self.a.T
        v = manifold.all_partials(w, g_w)
        return float(np.linalg.norm(x - self.c) ** 2 + v @ v)

    def state(self, schedule: StepSchedule,
              rule: SelectionRule | None = None,
              seed: int = 0) -> OptimizerState:
        x0, w0 = self.init(seed)
        return OptimizerState(w=w0, x={"x": x0}, schedule=schedule, rule=rule,
                              rng=np.random.default_rng(seed + 1),
                              reorth_every=None)
