"""Diagnostics: gradient-sparsity profiles, the weighted-average
convergence metric, and wall-clock benchmarks for the update kernels.

Mass fractions in sparsity profiles use squared magnitudes, so "x% of
the coordinates carry 95% of the norm" refers to the Euclidean norm of
the Riemannian gradient (the coordinate vector is its orthonormal
expansion).  Linear-mass variants are computed alongside and written to
CSV for comparison.
"""

from __future__ import annotations

import math
import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import copytask, manifold, optim, rnn

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

__all__ = [
    "BenchRecord",
    "ConvergenceTrace",
    "SparsityProfile",
    "bench_update",
    "convergence_metric",
    "decade_edges",
    "histogram",
    "kahan_cumsum",
    "loglog_slope",
    "sparsity_profile",
]


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------

@dataclass
class SparsityProfile:
    sorted_magnitudes: np.ndarray  # descending |v|
    cumulative_mass: np.ndarray    # cumulative squared-mass fractions
    frac95: float
    frac99: float
    frac95_abs: float              # linear-mass variants, reported in CSV
    frac99_abs: float
    norm: float

    @property
    def n_coords(self) -> int:
        return self.sorted_magnitudes.size


def _frac_needed(cum: np.ndarray, p: float) -> float:
    # smallest n with cum[n-1] >= p, as a fraction of the length;
    # the tiny slack absorbs cumsum roundoff at exact-ratio plateaus
    n = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    return n / cum.size


def sparsity_profile(partials: np.ndarray) -> SparsityProfile:
    """Profile of coordinate magnitudes; all-zero input yields frac = 0."""
    v = np.asarray(partials, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty partials vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite partials")
    mags = np.sort(np.abs(v))[::-1]
    sq = mags * mags
    total = sq.sum()
    if total == 0.0:
        zeros = np.zeros_like(mags)
        return SparsityProfile(mags, zeros, 0.0, 0.0, 0.0, 0.0, 0.0)
    cum = np.cumsum(sq) / total
    cum_abs = np.cumsum(mags) / mags.sum()
    return SparsityProfile(
        sorted_magnitudes=mags,
        cumulative_mass=cum,
        frac95=_frac_needed(cum, 0.95),
        frac99=_frac_needed(cum, 0.99),
        frac95_abs=_frac_needed(cum_abs, 0.95),
        frac99_abs=_frac_needed(cum_abs, 0.99),
        norm=float(math.sqrt(total)),
    )


def decade_edges(values: np.ndarray) -> np.ndarray:
    """Log-spaced decade bin edges covering the nonzero magnitudes."""
    mags = np.abs(np.asarray(values, dtype=np.float64))
    nz = mags[mags > 0]
    if nz.size == 0:
        return 10.0 ** np.arange(-16.0, 1.0)
    lo = math.floor(math.log10(nz.min()))
    hi = math.ceil(math.log10(nz.max()))
    if hi == lo:
        hi += 1
    return 10.0 ** np.arange(lo, hi + 1)


@dataclass
class Histogram:
    bin_lo: np.ndarray  # row 0 is the underflow bin [0, edges[0])
    bin_hi: np.ndarray  # last row is the overflow bin [edges[-1], inf)
    counts: np.ndarray


def histogram(partials: np.ndarray, log_bins: np.ndarray) -> Histogram:
    """Counts of |v_i| per bin; zeros (and anything below the first
    edge) land in an underflow bin, values at or above the last edge in
    an overflow bin, so the counts always sum to D."""
    v = np.abs(np.asarray(partials, dtype=np.float64).ravel())
    edges = np.asarray(log_bins, dtype=np.float64).ravel()
    if edges.size < 2:
        raise ValueError("need at least two bin edges")
    if np.any(edges <= 0):
        raise ValueError("bin edges must be positive")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    pos = np.searchsorted(edges, v, side="right")
    counts = np.bincount(pos, minlength=edges.size + 1)
    lo = np.concatenate([[0.0], edges])
    hi = np.concatenate([edges, [np.inf]])
    return Histogram(bin_lo=lo, bin_hi=hi, counts=counts)


# ---------------------------------------------------------------------------
# convergence metric
# ---------------------------------------------------------------------------

def kahan_cumsum(x: np.ndarray) -> np.ndarray:
    """Compensated (Kahan) running sum; keeps the metric stable over
    10^6-term stepsize sums."""
    x = np.asarray(x, dtype=np.float64).ravel()
    out = np.empty_like(x)
    s = 0.0
    comp = 0.0
    for idx in range(x.size):
        y = x[idx] - comp
        t = s + y
        comp = (t - s) - y
        s = t
        out[idx] = s
    return out


def convergence_metric(alphas: np.ndarray, grad_norm_sq: np.ndarray) -> np.ndarray:
    """Running weighted average M_K = sum_{k<=K} a^k g^k / sum_{k<=K} a^k."""
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    gsq = np.asarray(grad_norm_sq, dtype=np.float64).ravel()
    if alphas.size == 0 or alphas.size != gsq.size:
        raise ValueError("alphas and grad_norm_sq must be equal-length, nonempty")
    num = kahan_cumsum(alphas * gsq)
    den = kahan_cumsum(alphas)
    return num / den


@dataclass
class ConvergenceTrace:
    alphas: np.ndarray
    grad_norm_sq: np.ndarray
    m: np.ndarray  # M_K per iteration

    @classmethod
    def from_arrays(cls, alphas: np.ndarray, grad_norm_sq: np.ndarray) -> "ConvergenceTrace":
        return cls(np.asarray(alphas, dtype=np.float64),
                   np.asarray(grad_norm_sq, dtype=np.float64),
                   convergence_metric(alphas, grad_norm_sq))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRecord:
    d: int
    optimizer: str
    phase: str
    median_s: float
    iqr_s: float
    mean_s: float
    flops: int
    reps: int


BENCH_OPTIMIZERS = ("sgd", "srgd", "srcd-u", "srcd-gs", "srcd-block-gs", "srcd-u-expm")


def _bench_state(optimizer: str, params: rnn.RnnParams, seed: int) -> optim.OptimizerState:
    schedule = optim.StepSchedule("fixed", 2e-4)
    rules = {
        "srcd-u": optim.SelectionRule("uniform"),
        "srcd-u-expm": optim.SelectionRule("uniform"),
        "srcd-gs": optim.SelectionRule("gauss_southwell"),
        "srcd-block-gs": optim.SelectionRule("block_gs"),
    }
    return optim.OptimizerState.for_rnn(
        params, schedule, rule=rules.get(optimizer), seed=seed,
        reorth_every=None)


def _step_fn(optimizer: str):
    if optimizer == "sgd":
        return optim.sgd_step
    if optimizer == "srgd":
        return optim.srgd_step
    if optimizer == "srcd-u-expm":
        # single-coordinate update routed through the dense exponential,
        # the O(d^3) path the Givens shortcut replaces
        def step(state, grads):
            alpha = optim.schedule_step(state.schedule, state.k)
            for name, arr in state.x.items():
                arr -= alpha * grads.x_blocks()[name]
            i = optim.select_uniform(state.rng, manifold.num_coords(state.w.shape[0]))
            theta = manifold.partial_derivative(state.w, grads.w, i)
            eta = manifold.basis_tangent(state.w, i)
            state.w[...] = manifold.exp_map(state.w, -alpha * theta * eta.value)
            state.k += 1
            return state
        return step
    if optimizer in ("srcd-u", "srcd-gs", "srcd-block-gs"):
        return optim.srcd_step
    raise ValueError(f"unknown optimizer {optimizer!r}")


def bench_update(
    optimizer: str,
    d: int,
    reps: int = 30,
    warmup: int = 5,
    phase: str = "update",
    batch: int = 32,
    seed: int = 0,
) -> BenchRecord:
    """Median/IQR wall time per step on the monotonic clock.

    phase="update" times only the parameter update given precomputed
    gradients (Table-1 "optim.step()" analogue; the gradient content is
    random since it does not affect cost).  phase="backward_update"
    times BPTT plus the update on a real copy-task batch (desk-scale
    sequence at the requested width).  Timing runs under a 1-thread
    BLAS limit when threadpoolctl is available; setup and allocation
    stay outside the timed region, and the same W is reused across reps
    (fresh-W-per-rep would time initialization, not the update).
    """
    if d < 4:
        raise ValueError("bench needs d >= 4")
    if phase not in ("update", "backward_update"):
        raise ValueError(f"unknown phase {phase!r}")
    if reps < 30 or warmup < 5:
        raise ValueError("need reps >= 30 and warmup >= 5")
    rng = np.random.default_rng(seed)
    task = copytask.CopyTaskConfig(alphabet=9, copy_len=5, lag=100, batch=batch)
    params = rnn.init_params(d, task.n_input_classes, task.n_output_classes, seed)
    state = _bench_state(optimizer, params, seed)
    step = _step_fn(optimizer)

    if phase == "update":
        grads = optim.GradPack(
            w=rng.standard_normal((d, d)),
            x={name: rng.standard_normal(arr.shape) * 0.01
               for name, arr in state.x.items()})
        def timed_once() -> float:
            t0 = time.perf_counter()
            step(state, grads)
            return time.perf_counter() - t0
    else:
        data = copytask.generate_batch(task, rng)
        x1h = copytask.one_hot(data.inputs, task.n_input_classes)
        def timed_once() -> float:
            t0 = time.perf_counter()
            _, grads = rnn.backward(params, x1h, data.targets, data.mask)
            step(state, grads)
            return time.perf_counter() - t0

    limit = threadpool_limits(limits=1) if threadpool_limits is not None else nullcontext()
    with limit:
        for _ in range(warmup):
            timed_once()
        times = np.array([timed_once() for _ in range(reps)])

    # analytic flop estimate for one update (W path only)
    manifold.flops.reset()
    if phase == "update":
        step(state, grads)
    else:
        _, grads2 = rnn.backward(params, x1h, data.targets, data.mask)
        step(state, grads2)
    counted = manifold.flops.total()
    manifold.flops.reset()

    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return BenchRecord(d=d, optimizer=optimizer, phase=phase,
                       median_s=float(q50), iqr_s=float(q75 - q25),
                       mean_s=float(times.mean()), flops=int(counted),
                       reps=reps)


def loglog_slope(dims, times) -> float:
    """Least-squares slope of log(time) against log(d)."""
    x = np.log(np.asarray(dims, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
