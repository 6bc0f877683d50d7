"""Experiment runner.

Subcommands: train, sparsity, convergence, bench, check.  Every run is
driven by a flat key = value config (INI sections group related keys;
key names are globally unique) and any key can be overridden by a
command-line flag of the same name, e.g. `--alpha0 1e-3`.

Outputs land in a per-run directory under --out, the ORTHOCD_RUNS
environment variable, or ./runs, containing the resolved config
(config.ini), run metadata (run_meta.json, status running/done/failed),
and the CSVs documented in the README.  A given (config, seed) pair
reproduces every numeric output bitwise.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import platform
import subprocess
import sys
import time
from configparser import ConfigParser
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analysis, copytask, manifold, optim, rnn

__all__ = ["ExperimentConfig", "ConfigError", "main", "parse_config",
           "cmd_train", "cmd_sparsity", "cmd_convergence", "cmd_bench",
           "cmd_check", "run_training", "run_convergence"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    # [task]
    preset: str = "desk"        # paper | desk | custom
    alphabet: int = 9
    copy_len: int = 5
    lag: int = 100
    batch: int = 32
    d: int = 64
    mask: str = "full"          # full | recall
    # [optimizer]
    optimizer: str = "srcd-gs"  # sgd | srgd | srcd-u | srcd-gs | srcd-block-gs
    block_fraction: float = 0.005
    disjoint: bool = True
    reorth_every: int = 1000
    # [schedule]
    schedule: str = "fixed"     # fixed | polynomial
    alpha0: float = 2e-4
    power: float = 0.75
    offset: float = 1.0
    robbins_monro: bool = False
    # [run]
    iterations: int = 500
    seed: int = 0
    out: str = ""
    log_every: int = 1
    # [convergence]
    conv_d: int = 16
    noise_std: float = 0.1
    conv_seeds: int = 5
    x_dim: int = 4
    # [bench]
    bench_dims: str = "64,256,1024"
    bench_phase_d: int = 190
    bench_reps: int = 30
    bench_warmup: int = 5
    bench_batch: int = 32


_SECTIONS = {
    "task": ("preset", "alphabet", "copy_len", "lag", "batch", "d", "mask"),
    "optimizer": ("optimizer", "block_fraction", "disjoint", "reorth_every"),
    "schedule": ("schedule", "alpha0", "power", "offset", "robbins_monro"),
    "run": ("iterations", "seed", "out", "log_every"),
    "convergence": ("conv_d", "noise_std", "conv_seeds", "x_dim"),
    "bench": ("bench_dims", "bench_phase_d", "bench_reps", "bench_warmup",
              "bench_batch"),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_KEY_TO_SECTION = {k: s for s, keys in _SECTIONS.items() for k in keys}

_PRESETS = {
    "paper": {"alphabet": 9, "copy_len": 10, "lag": 1000, "batch": 128, "d": 190},
    "desk": {"alphabet": 9, "copy_len": 5, "lag": 100, "batch": 32, "d": 64},
    "custom": {},
}

OPTIMIZERS = ("sgd", "srgd", "srcd-u", "srcd-gs", "srcd-block-gs")


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config(path: str | None = None,
                 overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Resolve a config: defaults, then preset, then file keys, then
    flag overrides."""
    file_vals: dict[str, object] = {}
    if path is not None:
        parser = ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _FIELD_TYPES or _KEY_TO_SECTION[key] != section:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                file_vals[key] = _coerce(key, raw)
    flag_vals: dict[str, object] = {}
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        flag_vals[key] = raw if not isinstance(raw, str) else _coerce(key, raw)

    preset = flag_vals.get("preset", file_vals.get("preset", "desk"))
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged: dict[str, object] = dict(_PRESETS[preset])
    merged["preset"] = preset
    merged.update(file_vals)
    merged.update(flag_vals)
    cfg = ExperimentConfig(**{k: v for k, v in merged.items()})
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.optimizer not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.mask not in ("full", "recall"):
        raise ConfigError(f"unknown mask mode {cfg.mask!r}")
    if cfg.schedule not in ("fixed", "polynomial"):
        raise ConfigError(f"unknown schedule {cfg.schedule!r}")
    if cfg.iterations < 0 or cfg.log_every < 1:
        raise ConfigError("iterations must be >= 0 and log_every >= 1")
    if cfg.d < 2 or cfg.d % 2 != 0:
        raise ConfigError(f"d must be even and >= 2, got {cfg.d}")
    if cfg.conv_d < 2:
        raise ConfigError("conv_d must be >= 2")
    for key in ("alphabet", "copy_len", "batch", "conv_seeds", "x_dim"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.lag < 0 or cfg.noise_std < 0:
        raise ConfigError("lag and noise_std must be >= 0")
    try:
        _schedule_from(cfg)
        if cfg.optimizer == "srcd-block-gs":
            optim.SelectionRule("block_gs", block_fraction=cfg.block_fraction,
                                disjoint=cfg.disjoint)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        [int(tok) for tok in cfg.bench_dims.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad bench_dims: {cfg.bench_dims!r}") from exc


def _schedule_from(cfg: ExperimentConfig) -> optim.StepSchedule:
    return optim.StepSchedule(kind=cfg.schedule, alpha0=cfg.alpha0,
                              power=cfg.power, offset=cfg.offset,
                              robbins_monro=cfg.robbins_monro)


def _rule_from(cfg: ExperimentConfig) -> optim.SelectionRule | None:
    return {
        "sgd": None,
        "srgd": None,
        "srcd-u": optim.SelectionRule("uniform"),
        "srcd-gs": optim.SelectionRule("gauss_southwell"),
        "srcd-block-gs": optim.SelectionRule(
            "block_gs", block_fraction=cfg.block_fraction, disjoint=cfg.disjoint),
    }[cfg.optimizer]


def _step_fn(optimizer: str):
    return {"sgd": optim.sgd_step, "srgd": optim.srgd_step}.get(
        optimizer, optim.srcd_step)


def config_to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run directories and artifacts
# ---------------------------------------------------------------------------

def _out_root() -> Path:
    return Path(os.environ.get("ORTHOCD_RUNS", "runs"))


def _run_dir(command: str, cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    digest = hashlib.sha256(
        (command + "\n" + config_to_ini(cfg)).encode()).hexdigest()[:10]
    return _out_root() / f"{command}-s{cfg.seed}-{digest}"


def _version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+git.{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _machine_metadata() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "cpu_count": os.cpu_count(),
        "thread_env": {k: os.environ[k] for k in
                       ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
                       if k in os.environ},
    }


class RunDir:
    """Output directory with status bookkeeping."""

    def __init__(self, command: str, cfg: ExperimentConfig):
        self.path = _run_dir(command, cfg)
        self.path.mkdir(parents=True, exist_ok=True)
        self.meta = {
            "command": command,
            "version": _version_string(),
            "machine": _machine_metadata(),
            "status": "running",
            "started_unix": time.time(),
        }
        (self.path / "config.ini").write_text(config_to_ini(cfg))
        self._write_meta()

    def _write_meta(self) -> None:
        (self.path / "run_meta.json").write_text(
            json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, **extra) -> None:
        self.meta.update(extra)
        self.meta["status"] = status
        self.meta["ended_unix"] = time.time()
        self._write_meta()

    def write_csv(self, name: str, header: list[str], rows) -> None:
        with open(self.path / name, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")

    def write_json(self, name: str, obj) -> None:
        (self.path / name).write_text(
            json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (np.floating,)):
        return format(float(v), ".17g")
    return str(v)


# ---------------------------------------------------------------------------
# training core (shared by train and sparsity)
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: rnn.RnnParams
    losses: np.ndarray
    alphas: np.ndarray
    grad_norm_sq: np.ndarray
    task: copytask.CopyTaskConfig
    wall_s: float


def _task_from(cfg: ExperimentConfig) -> copytask.CopyTaskConfig:
    return copytask.CopyTaskConfig(alphabet=cfg.alphabet, copy_len=cfg.copy_len,
                                   lag=cfg.lag, batch=cfg.batch)


def run_training(cfg: ExperimentConfig) -> TrainResult:
    """Train the RNN on the copy task per the config.

    Seed derivation keeps the batch stream identical across optimizer
    choices (common random numbers for the ordering comparisons):
    initialization uses `seed`, batches use stream [seed, 1], coordinate
    selection [seed, 2].
    """
    task = _task_from(cfg)
    params = rnn.init_params(cfg.d, task.n_input_classes, task.n_output_classes,
                             seed=cfg.seed)
    schedule = _schedule_from(cfg)
    rule = _rule_from(cfg)
    state = optim.OptimizerState.for_rnn(
        params, schedule, rule=rule, seed=[cfg.seed, 2],
        reorth_every=cfg.reorth_every if cfg.optimizer == "srgd" else None)
    step = _step_fn(cfg.optimizer)
    batch_rng = np.random.default_rng([cfg.seed, 1])

    losses = np.empty(cfg.iterations)
    alphas = np.empty(cfg.iterations)
    gnormsq = np.empty(cfg.iterations)
    t0 = time.perf_counter()
    for k in range(cfg.iterations):
        data = copytask.generate_batch(task, batch_rng, mask_mode=cfg.mask)
        x1h = copytask.one_hot(data.inputs, task.n_input_classes)
        value, grads = rnn.backward(params, x1h, data.targets, data.mask)
        if not math.isfinite(value):
            raise optim.NumericError(f"non-finite loss at iteration {k}")
        v = manifold.all_partials(state.w, grads.w)
        alphas[k] = optim.schedule_step(schedule, state.k)
        losses[k] = value
        gnormsq[k] = float(v @ v) + sum(
            float(np.sum(g * g)) for g in grads.x_blocks().values())
        step(state, grads)
    wall = time.perf_counter() - t0
    return TrainResult(params=params, losses=losses, alphas=alphas,
                       grad_norm_sq=gnormsq, task=task, wall_s=wall)


def _minibatch_partials(params: rnn.RnnParams, task: copytask.CopyTaskConfig,
                        rng: np.random.Generator, mask_mode: str) -> np.ndarray:
    data = copytask.generate_batch(task, rng, mask_mode=mask_mode)
    x1h = copytask.one_hot(data.inputs, task.n_input_classes)
    _, grads = rnn.backward(params, x1h, data.targets, data.mask)
    return manifold.all_partials(params.w, grads.w)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, rundir: RunDir) -> None:
    result = run_training(cfg)
    m_k = analysis.convergence_metric(result.alphas, result.grad_norm_sq) \
        if cfg.iterations else np.empty(0)
    rundir.write_csv(
        "trace.csv", ["k", "alpha", "loss", "gnormsq", "M_K"],
        ((k, result.alphas[k], result.losses[k], result.grad_norm_sq[k], m_k[k])
         for k in range(cfg.iterations)))
    rnn.save_checkpoint(rundir.path / "checkpoint.bin", result.params,
                        seed=cfg.seed)
    eval_rng = np.random.default_rng([cfg.seed, 3])
    data = copytask.generate_batch(result.task, eval_rng, mask_mode=cfg.mask)
    x1h = copytask.one_hot(data.inputs, result.task.n_input_classes)
    trace = rnn.forward(result.params, x1h)
    eval_loss = rnn.loss(trace.logits, data.targets, data.mask)
    rundir.write_json("summary.json", {
        "initial_loss": result.losses[0] if cfg.iterations else None,
        "final_loss": result.losses[-1] if cfg.iterations else None,
        "eval_loss": eval_loss,
        "baseline_loss": copytask.baseline_loss(result.task),
        "accuracy": copytask.accuracy(trace.logits, data, result.task),
        "wall_time_s": result.wall_s,
        "iterations": cfg.iterations,
    })


def cmd_sparsity(cfg: ExperimentConfig, rundir: RunDir) -> None:
    task = _task_from(cfg)
    params = rnn.init_params(cfg.d, task.n_input_classes, task.n_output_classes,
                             seed=cfg.seed)
    probe_rng = np.random.default_rng([cfg.seed, 4])
    v_init = _minibatch_partials(params, task, probe_rng, cfg.mask)
    result = run_training(cfg)
    v_final = _minibatch_partials(result.params, task, probe_rng, cfg.mask)

    prof_init = analysis.sparsity_profile(v_init)
    prof_final = analysis.sparsity_profile(v_final)
    edges = analysis.decade_edges(np.concatenate([v_init, v_final]))
    for name, v in (("hist_init.csv", v_init), ("hist_final.csv", v_final)):
        hist = analysis.histogram(v, edges)
        rundir.write_csv(name, ["bin_lo", "bin_hi", "count"],
                         zip(hist.bin_lo, hist.bin_hi, hist.counts))
    rundir.write_csv(
        "sparsity.csv",
        ["iteration", "frac95", "frac99", "norm", "frac95_abs", "frac99_abs"],
        [(0, prof_init.frac95, prof_init.frac99, prof_init.norm,
          prof_init.frac95_abs, prof_init.frac99_abs),
         (cfg.iterations, prof_final.frac95, prof_final.frac99, prof_final.norm,
          prof_final.frac95_abs, prof_final.frac99_abs)])
    rundir.write_json("summary.json", {
        "frac95_init": prof_init.frac95,
        "frac95_final": prof_final.frac95,
        "frac99_init": prof_init.frac99,
        "frac99_final": prof_final.frac99,
        "spread_increased": bool(prof_final.frac95 > prof_init.frac95),
        "wall_time_s": result.wall_s,
    })


@dataclass
class ConvergenceResult:
    alphas: np.ndarray
    grad_norm_sq: np.ndarray
    losses: np.ndarray
    m: np.ndarray


def run_convergence(cfg: ExperimentConfig, seed: int) -> ConvergenceResult:
    """SRCD-U on the synthetic quadratic; exact squared gradient norms
    recorded every iteration, noisy gradients fed to the optimizer."""
    problem = optim.SyntheticProblem.make(
        cfg.conv_d, (cfg.x_dim, cfg.x_dim), noise_std=cfg.noise_std,
        seed=cfg.seed)
    schedule = _schedule_from(cfg)
    state = problem.state(schedule, rule=optim.SelectionRule("uniform"),
                          seed=seed)
    noise_rng = np.random.default_rng([seed, 5])
    n = cfg.iterations
    alphas = np.empty(n)
    gsq = np.empty(n)
    losses = np.empty(n)
    x = state.x["x"]
    for k in range(n):
        alphas[k] = optim.schedule_step(schedule, k)
        gsq[k] = problem.grad_norm_sq(x, state.w)
        losses[k] = problem.loss(x, state.w)
        grads = problem.grads(x, state.w,
                              rng=noise_rng if cfg.noise_std > 0 else None)
        optim.srcd_step(state, grads)
    m = analysis.convergence_metric(alphas, gsq)
    return ConvergenceResult(alphas=alphas, grad_norm_sq=gsq, losses=losses, m=m)


def cmd_convergence(cfg: ExperimentConfig, rundir: RunDir) -> None:
    if not cfg.robbins_monro:
        raise ConfigError("convergence requires a schedule with robbins_monro = true")
    checkpoints = [c for c in (10**2, 10**3, 10**4, 10**5) if c <= cfg.iterations]
    summary: dict = {"checkpoints": checkpoints, "seeds": {}}
    ratios = []
    for s in range(cfg.conv_seeds):
        seed = cfg.seed + s
        res = run_convergence(cfg, seed)
        if s == 0:
            rundir.write_csv(
                "trace.csv", ["k", "alpha", "loss", "gnormsq", "M_K"],
                ((k, res.alphas[k], res.losses[k], res.grad_norm_sq[k], res.m[k])
                 for k in range(cfg.iterations)))
        entry = {f"M_{c}": res.m[c - 1] for c in checkpoints}
        entry["final_gnormsq"] = res.grad_norm_sq[-1]
        summary["seeds"][seed] = entry
        if len(checkpoints) >= 2:
            ratios.append(res.m[checkpoints[-1] - 1] / res.m[checkpoints[0] - 1])
    if ratios:
        summary["mean_M_last_over_M_first"] = float(np.mean(ratios))
    rundir.write_json("summary.json", summary)


def cmd_bench(cfg: ExperimentConfig, rundir: RunDir) -> None:
    dims = [int(tok) for tok in cfg.bench_dims.split(",") if tok.strip()]
    cells: dict[tuple, analysis.BenchRecord] = {}

    def _run(kind: str, d: int, phase: str) -> None:
        key = (kind, d, phase)
        if key not in cells:
            cells[key] = analysis.bench_update(
                kind, d, reps=cfg.bench_reps, warmup=cfg.bench_warmup,
                phase=phase, batch=cfg.bench_batch, seed=cfg.seed)

    for d in dims:
        for kind in ("srcd-u", "srgd"):
            _run(kind, d, "update")
    for kind in ("sgd", "srgd", "srcd-gs", "srcd-u"):
        for phase in ("update", "backward_update"):
            _run(kind, cfg.bench_phase_d, phase)
    records = list(cells.values())
    rundir.write_csv(
        "bench.csv",
        ["d", "optimizer", "phase", "median_s", "iqr_s", "flops", "mean_s", "reps"],
        ((r.d, r.optimizer, r.phase, r.median_s, r.iqr_s, r.flops, r.mean_s,
          r.reps) for r in records))
    slopes = {}
    if len(dims) >= 2:
        for kind in ("srcd-u", "srgd"):
            med = [cells[(kind, d, "update")].median_s for d in dims]
            slopes[kind] = analysis.loglog_slope(dims, med)
    ratios = {}
    for kind in ("sgd", "srgd", "srcd-gs", "srcd-u"):
        upd = cells.get((kind, cfg.bench_phase_d, "update"))
        bwd = cells.get((kind, cfg.bench_phase_d, "backward_update"))
        if upd and bwd:
            ratios[kind] = upd.median_s / bwd.median_s
    rundir.write_json("summary.json", {
        "dims": dims,
        "loglog_slopes_update": slopes,
        "update_over_backward_update": ratios,
    })


# ---------------------------------------------------------------------------
# invariant check suite
# ---------------------------------------------------------------------------

def _check_coord_indexing() -> None:
    for d in (2, 3, 5, 8, 21, 40):
        n = manifold.num_coords(d)
        seen = set()
        for i in range(1, n + 1):
            j, l = manifold.coord_pair(i, d)
            assert 1 <= j < l <= d
            assert manifold.coord_index(j, l, d) == i
            seen.add((j, l))
        assert len(seen) == n


def _check_basis_orthonormal() -> None:
    rng = np.random.default_rng(0)
    w = manifold.random_orthogonal(6, rng)
    n = manifold.num_coords(6)
    etas = [manifold.basis_tangent(w, i) for i in range(1, n + 1)]
    for a in range(n):
        for b in range(a, n):
            want = 1.0 if a == b else 0.0
            assert abs(manifold.metric(etas[a], etas[b]) - want) < 1e-12


def _check_projection() -> None:
    rng = np.random.default_rng(1)
    w = manifold.random_orthogonal(12, rng)
    m = rng.standard_normal((12, 12))
    n_mat = rng.standard_normal((12, 12))
    p_m = manifold.tangent_project(w, m)
    p_p_m = manifold.tangent_project(w, p_m.value)
    assert np.linalg.norm(p_p_m.value - p_m.value) < 1e-12
    p_n = manifold.tangent_project(w, n_mat)
    lhs = float(np.vdot(p_m.value, n_mat))
    rhs = float(np.vdot(m, p_n.value))
    assert abs(lhs - rhs) < 1e-10


def _check_parseval() -> None:
    rng = np.random.default_rng(2)
    w = manifold.random_orthogonal(50, rng)
    g = rng.standard_normal((50, 50))
    v = manifold.all_partials(w, g)
    proj = manifold.tangent_project(w, g)
    assert abs(np.linalg.norm(v) - manifold.norm(proj)) < 1e-10 * manifold.norm(proj)


def _check_givens_exp_consistency() -> None:
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = manifold.random_orthogonal(25, rng)
        i = int(rng.integers(1, manifold.num_coords(25) + 1))
        theta = float(rng.uniform(-np.pi, np.pi))
        eta = manifold.basis_tangent(w, i)
        via_exp = manifold.exp_map(w, theta * eta.value)
        via_givens = manifold.givens_update(w, i, theta)
        assert np.linalg.norm(via_exp - via_givens) < 1e-12


def _check_drift() -> None:
    rng = np.random.default_rng(4)
    w = manifold.random_orthogonal(64, rng)
    n = manifold.num_coords(64)
    for _ in range(2000):
        manifold.givens_update(w, int(rng.integers(1, n + 1)),
                               float(rng.uniform(-1, 1)), out=w)
    assert manifold.orthogonality_defect(w) < 1e-10


def _check_reorthogonalize() -> None:
    rng = np.random.default_rng(5)
    q = manifold.random_orthogonal(64, rng)
    repaired = manifold.reorthogonalize(1.001 * q)
    assert manifold.orthogonality_defect(repaired) <= 1e-14
    assert np.linalg.norm(repaired - q) < 1e-3


def _check_bptt_fd() -> None:
    rng = np.random.default_rng(6)
    params = rnn.init_params(4, 3, 2, seed=0)
    inputs = rng.standard_normal((2, 8, 3))
    targets = rng.integers(0, 2, (2, 8))
    _, grads = rnn.backward(params, inputs, targets)
    h = 1e-5
    for _ in range(10):
        flat = params.w_in
        idx = (int(rng.integers(flat.shape[0])), int(rng.integers(flat.shape[1])))
        orig = flat[idx]
        flat[idx] = orig + h
        up = rnn.loss(rnn.forward(params, inputs).logits, targets)
        flat[idx] = orig - h
        dn = rnn.loss(rnn.forward(params, inputs).logits, targets)
        flat[idx] = orig
        fd = (up - dn) / (2 * h)
        an = grads.w_in[idx]
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))


def _check_copytask() -> None:
    rng = np.random.default_rng(7)
    for _ in range(100):
        cfg = copytask.CopyTaskConfig(
            alphabet=int(rng.integers(2, 12)), copy_len=int(rng.integers(1, 8)),
            lag=int(rng.integers(0, 30)), batch=int(rng.integers(1, 8)))
        data = copytask.generate_batch(cfg, rng)
        k, lag = cfg.copy_len, cfg.lag
        assert data.inputs.shape == (cfg.batch, cfg.seq_len)
        assert np.all(data.inputs[:, :k] < cfg.alphabet)
        assert np.all(data.inputs[:, k:k + lag] == cfg.blank)
        assert np.all(data.inputs[:, k + lag] == cfg.start)
        assert np.all(data.inputs[:, k + lag + 1:] == cfg.blank)
        assert np.all(data.targets[:, :lag + k] == cfg.blank)
        assert np.all(data.targets[:, lag + k:] == data.inputs[:, :k])
    base = copytask.baseline_loss(copytask.PAPER)
    assert abs(base - 10 * np.log(9) / 1020) < 1e-15


def _check_loss_values() -> None:
    logits = np.zeros((1, 4, 7))
    targets = np.zeros((1, 4), dtype=int)
    assert abs(rnn.loss(logits, targets) - np.log(7)) < 1e-12
    x = np.array([1.0, -3.0, 0.0])
    b = np.array([-2.0, 1.0, 5.0])
    out = rnn.modrelu(x, b)
    assert out[0] == 0.0 and out[1] == -4.0 and out[2] == 0.0


def _check_schedules() -> None:
    try:
        optim.StepSchedule("polynomial", 1.0, power=0.4, robbins_monro=True)
    except ValueError:
        pass
    else:
        raise AssertionError("power outside (0.5, 1] accepted")
    sched = optim.StepSchedule("polynomial", 1.0, power=0.75, offset=1.0,
                               robbins_monro=True)
    k = np.arange(10**4)
    alpha = sched.alpha0 / (1 + k / sched.offset) ** sched.power
    assert alpha.sum() > 10 * (alpha**2).sum()


def _check_selection() -> None:
    assert optim.select_gauss_southwell(np.array([0.1, -5.0, 0.3])) == 2
    assert optim.select_gauss_southwell(np.array([2.0, -2.0])) == 1
    rng = np.random.default_rng(8)
    for _ in range(20):
        d = int(rng.integers(4, 12))
        v = rng.standard_normal(manifold.num_coords(d))
        coords = optim.select_block_gs(v, 3, d, disjoint=True)
        cols = [c for i in coords for c in manifold.coord_pair(i, d)]
        assert len(set(cols)) == len(cols)


def _check_metric_recompute() -> None:
    alphas = np.full(1000, 0.5)
    gsq = np.full(1000, 3.0)
    m = analysis.convergence_metric(alphas, gsq)
    assert np.all(np.abs(m - 3.0) < 1e-12)


def _check_step_equivalence() -> None:
    rng = np.random.default_rng(9)
    d = 10
    params_a = rnn.init_params(d, 3, 2, seed=1)
    params_b = params_a.copy()
    grads = rnn.Grads(
        w_in=rng.standard_normal(params_a.w_in.shape),
        w=rng.standard_normal((d, d)),
        w_out=rng.standard_normal(params_a.w_out.shape),
        b_out=rng.standard_normal(params_a.b_out.shape),
        b_mod=rng.standard_normal(params_a.b_mod.shape))
    sched = optim.StepSchedule("fixed", 1e-2)
    sa = optim.OptimizerState.for_rnn(params_a, sched, seed=0)
    sb = optim.OptimizerState.for_rnn(
        params_b, sched, rule=optim.SelectionRule("gauss_southwell"), seed=0)
    optim.srgd_step(sa, grads)
    optim.srcd_step(sb, grads)
    for name in sa.x:
        assert np.array_equal(sa.x[name], sb.x[name])


def _check_checkpoint(tmp: Path) -> None:
    params = rnn.init_params(8, 5, 4, seed=3)
    path = tmp / "ck.bin"
    rnn.save_checkpoint(path, params, seed=3)
    loaded, seed = rnn.load_checkpoint(path)
    assert seed == 3
    for a, b in zip((params.w_in, params.w, params.w_out, params.b_out,
                     params.b_mod),
                    (loaded.w_in, loaded.w, loaded.w_out, loaded.b_out,
                     loaded.b_mod)):
        assert np.array_equal(a, b)


def cmd_check(rundir: RunDir | None = None) -> int:
    import tempfile
    checks = [
        ("coord indexing round-trip", _check_coord_indexing),
        ("tangent basis orthonormal", _check_basis_orthonormal),
        ("projection idempotent and self-adjoint", _check_projection),
        ("Parseval identity", _check_parseval),
        ("givens equals exp_map", _check_givens_exp_consistency),
        ("orthogonality drift", _check_drift),
        ("reorthogonalize repair", _check_reorthogonalize),
        ("BPTT finite differences", _check_bptt_fd),
        ("copy task structure", _check_copytask),
        ("loss and modrelu values", _check_loss_values),
        ("schedule validation and sums", _check_schedules),
        ("coordinate selection rules", _check_selection),
        ("convergence metric recompute", _check_metric_recompute),
        ("shared unconstrained update", _check_step_equivalence),
    ]
    failed = 0
    for name, fn in checks:
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report and continue
            failed += 1
            print(f"[FAIL] {name}: {exc}")
        else:
            print(f"[PASS] {name}")
    with tempfile.TemporaryDirectory() as tmp:
        try:
            _check_checkpoint(Path(tmp))
        except Exception as exc:  # noqa: BLE001
            failed += 1
            print(f"[FAIL] checkpoint round-trip: {exc}")
        else:
            print("[PASS] checkpoint round-trip")
    print(f"{len(checks) + 1 - failed}/{len(checks) + 1} checks passed")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthocd",
        description="Riemannian coordinate-descent experiments on O(d)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("train", "train the RNN on the copying task"),
            ("sparsity", "gradient-sparsity snapshots at init and after training"),
            ("convergence", "SRCD-U on the synthetic problem, averaged gradient norms"),
            ("bench", "wall-clock cost of the update kernels"),
            ("check", "run the invariant suite")):
        p = sub.add_parser(name, help=helptext)
        if name == "check":
            continue
        p.add_argument("--config", default=None, metavar="PATH",
                       help="INI config file")
        for f in dataclasses.fields(ExperimentConfig):
            p.add_argument(f"--{f.name}", default=None, metavar=f.type.upper(),
                           help=f"override [{_KEY_TO_SECTION[f.name]}] {f.name}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "check":
        return cmd_check()
    rundir = None
    try:
        overrides = {f.name: getattr(args, f.name)
                     for f in dataclasses.fields(ExperimentConfig)
                     if getattr(args, f.name) is not None}
        cfg = parse_config(args.config, overrides)
        rundir = RunDir(args.command, cfg)
        t0 = time.perf_counter()
        {"train": cmd_train, "sparsity": cmd_sparsity,
         "convergence": cmd_convergence, "bench": cmd_bench}[args.command](cfg, rundir)
        rundir.finish("done", wall_time_s=time.perf_counter() - t0)
        print(f"done: {rundir.path}")
        return 0
    except ConfigError as exc:
        if rundir is not None:
            rundir.finish("failed", error=str(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (optim.NumericError, FloatingPointError) as exc:
        if rundir is not None:
            rundir.finish("failed", error=str(exc))
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
