"""Minimal recurrent network with an orthogonal recurrence.

    h(t) = phi(W_in x(t) + W h(t-1)),    y(t) = W_out h(t) + b_out,

with phi the modReLU activation.  `backward` accumulates exact BPTT
gradients for every parameter block; the gradient for W is the raw
Euclidean one (projection onto the tangent space is the geometry
module's job).

Arrays are batch-first: inputs (B, T, d_in), trace fields (B, T, .).
A 2D input (T, d_in) is treated as a batch of one.  All math is in
float64 and every function here is deterministic, so a fixed seed
reproduces runs bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import manifold

__all__ = [
    "ForwardTrace",
    "Grads",
    "RnnParams",
    "backward",
    "cayley_block_init",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss",
    "modrelu",
    "save_checkpoint",
]

_CKPT_MAGIC = b"ORNNCKP\x00"
_CKPT_VERSION = 1


@dataclass
class RnnParams:
    """Parameter blocks; W is the orthogonal recurrence (d x d)."""

    w_in: np.ndarray   # d x d_in
    w: np.ndarray      # d x d, orthogonal
    w_out: np.ndarray  # d_out x d
    b_out: np.ndarray  # d_out
    b_mod: np.ndarray  # d, modReLU bias

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_out.shape[0]

    def x_blocks(self) -> dict[str, np.ndarray]:
        """The unconstrained (non-orthogonal) blocks, by name."""
        return {"w_in": self.w_in, "w_out": self.w_out,
                "b_out": self.b_out, "b_mod": self.b_mod}

    def copy(self) -> "RnnParams":
        return RnnParams(self.w_in.copy(), self.w.copy(), self.w_out.copy(),
                         self.b_out.copy(), self.b_mod.copy())

    def check(self) -> None:
        d, d_in, d_out = self.d, self.d_in, self.d_out
        if self.w_in.shape != (d, d_in) or self.w.shape != (d, d):
            raise ValueError("inconsistent parameter shapes")
        if self.w_out.shape != (d_out, d) or self.b_out.shape != (d_out,):
            raise ValueError("inconsistent parameter shapes")
        if self.b_mod.shape != (d,):
            raise ValueError("inconsistent parameter shapes")
        manifold.OrthogonalMatrix(self.w)


@dataclass
class ForwardTrace:
    hidden: np.ndarray  # (B, T, d)
    preact: np.ndarray  # (B, T, d)
    logits: np.ndarray  # (B, T, d_out)


@dataclass
class Grads:
    """Euclidean gradients, same shapes as RnnParams.

    `w` is NOT projected onto the tangent space; consumers that need
    Riemannian quantities go through manifold.tangent_project or
    manifold.all_partials.
    """

    w_in: np.ndarray
    w: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    b_mod: np.ndarray

    def x_blocks(self) -> dict[str, np.ndarray]:
        return {"w_in": self.w_in, "w_out": self.w_out,
                "b_out": self.b_out, "b_mod": self.b_mod}


def modrelu(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sign(x) * max(|x| + b, 0), with 0 at x = 0 (sign(0) = 0)."""
    return np.sign(x) * np.maximum(np.abs(x) + b, 0.0)


def _as_batched(inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.ndim != 3:
        raise ValueError(f"inputs must be (B, T, d_in) or (T, d_in), got {inputs.shape}")
    return inputs


def forward(
    params: RnnParams,
    inputs: np.ndarray,
    h0: np.ndarray | None = None,
    activation: str = "modrelu",
) -> ForwardTrace:
    """Run the recurrence over a batch of sequences.

    `activation` is "modrelu" or "identity"; the identity hook exists so
    tests can isolate the linear dynamics (orthogonal W preserves the
    hidden-state norm exactly in that mode).
    """
    inputs = _as_batched(inputs)
    bsz, steps, d_in = inputs.shape
    if d_in != params.d_in:
        raise ValueError(f"input feature dim {d_in} != params d_in {params.d_in}")
    if activation not in ("modrelu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    d = params.d
    h = np.zeros((bsz, d)) if h0 is None else np.broadcast_to(
        np.asarray(h0, dtype=np.float64), (bsz, d)).copy()
    if h.shape != (bsz, d):
        raise ValueError("h0 has wrong dimension")

    preact = np.empty((bsz, steps, d))
    hidden = np.empty((bsz, steps, d))
    w_in_t = params.w_in.T
    w_t = params.w.T
    for t in range(steps):
        pre = inputs[:, t] @ w_in_t + h @ w_t
        preact[:, t] = pre
        h = modrelu(pre, params.b_mod) if activation == "modrelu" else pre
        hidden[:, t] = h
    logits = hidden @ params.w_out.T + params.b_out
    return ForwardTrace(hidden=hidden, preact=preact, logits=logits)


def _check_targets(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} != {logits.shape[:-1]}")
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"target class out of range [0, {n_classes})")
    return targets


def _resolve_mask(mask: np.ndarray | None, shape: tuple[int, ...]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == len(shape) - 1:
        mask = mask[None]
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != {shape}")
    return mask


def loss(
    logits: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
) -> float:
    """Softmax cross-entropy, averaged over the masked (batch, step)
    positions.  Log-sum-exp uses max-subtraction.  An all-false mask
    gives a constant loss, defined as 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None]
    targets = _check_targets(logits, targets)
    mask = _resolve_mask(mask, logits.shape[:-1])
    count = int(mask.sum())
    if count == 0:
        return 0.0
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    ce = lse - picked
    return float(ce[mask].sum() / count)


def _loss_and_dlogits(
    logits: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Loss plus its gradient (softmax - onehot) * mask / count."""
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    m = logits.max(axis=-1, keepdims=True)
    ez = np.exp(logits - m)
    sez = ez.sum(axis=-1, keepdims=True)
    softmax = ez / sez
    lse = np.log(sez[..., 0]) + m[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    value = float(((lse - picked)[mask]).sum() / count)
    dlogits = softmax
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / count
    return value, dlogits


def backward(
    params: RnnParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    h0: np.ndarray | None = None,
    activation: str = "modrelu",
) -> tuple[float, Grads]:
    """Forward pass plus exact reverse-mode accumulation through time.

    Returns (loss, Grads).  The modReLU subgradient is 0 both at the
    kink |x| + b = 0 and at x = 0.
    """
    inputs = _as_batched(inputs)
    bsz, steps, _ = inputs.shape
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None]
    trace = forward(params, inputs, h0=h0, activation=activation)
    targets = _check_targets(trace.logits, targets)
    mask = _resolve_mask(mask, trace.logits.shape[:-1])
    value, dlogits = _loss_and_dlogits(trace.logits, targets, mask)

    d = params.d
    g = Grads(
        w_in=np.zeros_like(params.w_in),
        w=np.zeros_like(params.w),
        w_out=np.einsum("btc,btd->cd", dlogits, trace.hidden),
        b_out=dlogits.sum(axis=(0, 1)),
        b_mod=np.zeros_like(params.b_mod),
    )
    dh_out = dlogits @ params.w_out  # (B, T, d)
    h_first = np.zeros((bsz, d)) if h0 is None else np.broadcast_to(
        np.asarray(h0, dtype=np.float64), (bsz, d))
    carry = np.zeros((bsz, d))
    for t in range(steps - 1, -1, -1):
        dh = dh_out[:, t] + carry
        pre = trace.preact[:, t]
        if activation == "modrelu":
            active = ((np.abs(pre) + params.b_mod) > 0.0) & (pre != 0.0)
            dpre = dh * active
            g.b_mod += (dpre * np.sign(pre)).sum(axis=0)
        else:
            dpre = dh
        g.w_in += dpre.T @ inputs[:, t]
        h_prev = trace.hidden[:, t - 1] if t > 0 else h_first
        g.w += dpre.T @ h_prev
        carry = dpre @ params.w
    return value, g


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def cayley_block_init(
    d: int,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    angles: np.ndarray | None = None,
) -> np.ndarray:
    """Orthogonal W0 = (I + A)^-1 (I - A), A block-diagonal with 2x2
    skew blocks [[0, s], [-s, 0]], s ~ Uniform[-pi, pi] per block.

    `angles` overrides the sampling (length d/2), for tests.  Each
    block maps to the closed-form rotation-like 2x2
    [[1-s^2, -2s], [2s, 1-s^2]] / (1+s^2); the implementation goes
    through the linear solve so the Cayley transform itself is what is
    exercised, and tests compare against the closed form.
    """
    if d % 2 != 0:
        raise ValueError(f"cayley_block_init needs even d, got {d}")
    if angles is None:
        if rng is None:
            rng = np.random.default_rng(seed)
        angles = rng.uniform(-np.pi, np.pi, size=d // 2)
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (d // 2,):
        raise ValueError(f"need {d // 2} block angles, got shape {angles.shape}")
    a = np.zeros((d, d))
    top = np.arange(0, d, 2)
    a[top, top + 1] = angles
    a[top + 1, top] = -angles
    eye = np.eye(d)
    return np.linalg.solve(eye + a, eye - a)


def init_params(d: int, d_in: int, d_out: int, seed: int = 0) -> RnnParams:
    """Deterministic initialization for a given seed.

    Draw order (part of the determinism contract): Cayley block angles,
    W_in, W_out, b_mod.  W_in and W_out use He scaling
    N(0, sqrt(2/fan_in)); b_mod ~ Uniform[-0.01, 0.01]; b_out = 0.
    """
    rng = np.random.default_rng(seed)
    w = cayley_block_init(d, rng=rng)
    w_in = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d, d_in))
    w_out = rng.normal(0.0, np.sqrt(2.0 / d), size=(d_out, d))
    b_mod = rng.uniform(-0.01, 0.01, size=d)
    b_out = np.zeros(d_out)
    return RnnParams(w_in=w_in, w=w, w_out=w_out, b_out=b_out, b_mod=b_mod)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: RnnParams, seed: int = 0) -> None:
    """Flat binary container; layout documented in the README.

    8-byte magic, 1 version byte, little-endian u32 d, d_in, d_out,
    u64 seed, then float64 row-major blocks in the order
    w_in, w, w_out, b_out, b_mod.
    """
    params.check()
    header = _CKPT_MAGIC + struct.pack(
        "<BIIIQ", _CKPT_VERSION, params.d, params.d_in, params.d_out, seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for block in (params.w_in, params.w, params.w_out,
                      params.b_out, params.b_mod):
            fh.write(np.ascontiguousarray(block, dtype=np.float64).tobytes())


def load_checkpoint(path) -> tuple[RnnParams, int]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, d, d_in, d_out, seed = struct.unpack("<BIIIQ", fh.read(21))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        def block(*shape: int) -> np.ndarray:
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated checkpoint")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        params = RnnParams(
            w_in=block(d, d_in), w=block(d, d), w_out=block(d_out, d),
            b_out=block(d_out), b_mod=block(d))
    params.check()
    return params, seed
