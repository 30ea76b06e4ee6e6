"""Cross-view epipolar attention via entropic optimal transport.

For each batch item and image row, the left/right feature columns are
scored against each other (scaled dot product), and the score matrix is
normalized with log-domain Sinkhorn iterations instead of a softmax.  The
result is an approximately doubly stochastic transport plan: rows sum to 1
exactly after the final row update, columns converge toward 1 with more
iterations.  Fusion mixes features across views through the plan, scaled by
per-channel weights that start at zero so the module is the identity at
initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    batched_matmul,
    conv2d,
    exp,
    layer_norm,
    logsumexp,
    mul,
    neg,
    transpose,
    zeros,
)


class NonConvergenceError(ArithmeticError):
    """The verification solver did not reach its tolerance within the cap."""


@dataclass(frozen=True)
class CostVolume:
    """Per-row match scores between left and right feature columns.

    ``values`` has shape (n, rows, w, w); entry (i, j) scores left column i
    against right column j on the same row.  Higher means a stronger match.
    The 1/sqrt(channels) scale is already applied.
    """

    values: Tensor
    scale: float = 1.0


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative per-row coupling matrices, shape (n, rows, w, w)."""

    values: Tensor

    def row_sums(self) -> np.ndarray:
        return self.values.data.sum(axis=3)

    def col_sums(self) -> np.ndarray:
        return self.values.data.sum(axis=2)


@dataclass(frozen=True)
class SinkhornConfig:
    """Iteration count for the normalization.

    Marginals are uniform 1/w per row; the converged coupling is rescaled by
    w so returned plans have unit row/column sums.
    """

    iters: int = 10

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")


@dataclass(frozen=True)
class DeamParams:
    """Weights of one cross-view interaction stage.

    ``fuse_scale_l`` / ``fuse_scale_r`` are the per-channel mixing scales on
    the transported features; both are zero-initialized so a fresh stage
    passes its inputs through unchanged.
    """

    norm_l_gain: Tensor
    norm_l_shift: Tensor
    norm_r_gain: Tensor
    norm_r_shift: Tensor
    match_l_w: Tensor    # 1x1 projection feeding the cost matrix, left view
    match_l_b: Tensor
    match_r_w: Tensor
    match_r_b: Tensor
    value_l_w: Tensor    # 1x1 projection of the features that get transported
    value_l_b: Tensor
    value_r_w: Tensor
    value_r_b: Tensor
    fuse_scale_l: Tensor
    fuse_scale_r: Tensor


def cost_matrix(u_l: Tensor, u_r: Tensor) -> CostVolume:
    """Scaled per-row similarity: M[h] = rowsL(h) @ rowsR(h)^T / sqrt(c).

    Both inputs are (n, c, h, w) feature maps of identical shape.
    """
    if u_l.shape != u_r.shape:
        raise ShapeError(f"feature shapes differ: {u_l.shape} vs {u_r.shape}")
    c = u_l.c
    rows_l = transpose(u_l, (0, 2, 3, 1))        # (n, h, w, c)
    rows_r = transpose(u_r, (0, 2, 1, 3))        # (n, h, c, w)
    scale = 1.0 / math.sqrt(c)
    scores = mul(batched_matmul(rows_l, rows_r), scale)
    return CostVolume(values=scores, scale=scale)


def sinkhorn(m: CostVolume, cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Log-domain Sinkhorn normalization of a cost volume.

    Per row: duals start at zero, then for each iteration the column dual is
    refreshed from a column-wise logsumexp and the row dual from a row-wise
    one (columns first).  The returned plan exp(M + u + v + log w) has rows
    summing to 1 exactly (up to rounding) and columns converging toward 1.
    All updates are overflow-safe for bounded scores, and gradients flow
    through every unrolled iteration.
    """
    scores = m.values
    w = scores.shape[3]
    if scores.shape[2] != w:
        raise ShapeError(f"cost volume must be square per row, got {scores.shape}")
    log_w = math.log(w)
    dt = scores.dtype
    u = zeros((scores.shape[0], scores.shape[1], w, 1), dtype=dt)
    v = zeros((scores.shape[0], scores.shape[1], 1, w), dtype=dt)
    for _ in range(cfg.iters):
        # log marginal is -log w on both sides: v = -log w - LSE_i(M + u)
        v = neg(add(logsumexp(add(scores, u), axis=2), log_w))
        u = neg(add(logsumexp(add(scores, v), axis=3), log_w))
    plan = exp(add(add(add(scores, u), v), log_w))
    return TransportPlan(values=plan)


def sinkhorn_oracle(m: CostVolume, tol: float = 1e-9,
                    max_iters: int = 10000) -> TransportPlan:
    """Independent verification solver: scaling-vector Sinkhorn in float64.

    Alternates the closed-form updates r = 1 / (K c) and c = 1 / (K^T r)
    with K = exp(M), targeting unit marginals directly, until the largest
    row/column-sum violation drops below ``tol``.  Suitable only for bounded
    scores (K is formed explicitly); not differentiable, not part of the
    forward path.
    """
    scores = m.values.data.astype(np.float64)
    if scores.shape[2] != scores.shape[3]:
        raise ShapeError(f"cost volume must be square per row, got {scores.shape}")
    kernel = np.exp(scores)
    n, rows, w, _ = scores.shape
    r = np.ones((n, rows, w, 1))
    c = np.ones((n, rows, w, 1))
    violation = math.inf
    for _ in range(max_iters):
        r = 1.0 / np.matmul(kernel, c)
        c = 1.0 / np.matmul(kernel.swapaxes(2, 3), r)
        plan = r * kernel * c.swapaxes(2, 3)
        violation = max(
            np.abs(plan.sum(axis=3) - 1.0).max(),
            np.abs(plan.sum(axis=2) - 1.0).max(),
        )
        if violation < tol:
            return TransportPlan(values=Tensor(plan))
    raise NonConvergenceError(
        f"marginal violation {violation:.3e} above {tol:.1e} after {max_iters} iterations"
    )


def _conv1x1(c: int) -> ConvSpec:
    return ConvSpec(out_ch=c, in_ch=c, kh=1, kw=1)


def deam_forward(x_l: Tensor, x_r: Tensor, p: DeamParams,
                 cfg: SinkhornConfig = SinkhornConfig()) -> tuple[Tensor, Tensor, TransportPlan]:
    """One cross-view interaction: match, transport, fuse.

    Match features come from a 1x1 projection of the normalized inputs,
    value features from a 1x1 projection of the raw inputs.  The transport
    plan moves right values to left positions (and its transpose the other
    way); each view adds the transported features scaled per channel.
    Returns the fused pair and the plan.
    """
    if x_l.shape != x_r.shape:
        raise ShapeError(f"view shapes differ: {x_l.shape} vs {x_r.shape}")
    c = x_l.c
    spec = _conv1x1(c)
    match_l = conv2d(layer_norm(x_l, p.norm_l_gain, p.norm_l_shift), spec, p.match_l_w, p.match_l_b)
    match_r = conv2d(layer_norm(x_r, p.norm_r_gain, p.norm_r_shift), spec, p.match_r_w, p.match_r_b)
    value_l = conv2d(x_l, spec, p.value_l_w, p.value_l_b)
    value_r = conv2d(x_r, spec, p.value_r_w, p.value_r_b)

    plan = sinkhorn(cost_matrix(match_l, match_r), cfg)
    t = plan.values

    rows_value_r = transpose(value_r, (0, 2, 3, 1))              # (n, h, w, c)
    rows_value_l = transpose(value_l, (0, 2, 3, 1))
    to_left = transpose(batched_matmul(t, rows_value_r), (0, 3, 1, 2))
    to_right = transpose(
        batched_matmul(transpose(t, (0, 1, 3, 2)), rows_value_l), (0, 3, 1, 2)
    )

    f_l = add(x_l, mul(p.fuse_scale_l, to_left))
    f_r = add(x_r, mul(p.fuse_scale_r, to_right))
    return f_l, f_r, plan


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def init_deam(c: int, rng: np.random.Generator) -> DeamParams:
    """Fresh stage parameters; the fusion scales start at exactly zero."""
    from .blocks import conv_init

    def bias():
        return Tensor(np.zeros((1, c, 1, 1), dtype=np.float32))

    def ones():
        return Tensor(np.ones((1, c, 1, 1), dtype=np.float32))

    spec = _conv1x1(c)
    return DeamParams(
        norm_l_gain=ones(), norm_l_shift=bias(),
        norm_r_gain=ones(), norm_r_shift=bias(),
        match_l_w=conv_init(rng, spec), match_l_b=bias(),
        match_r_w=conv_init(rng, spec), match_r_b=bias(),
        value_l_w=conv_init(rng, spec), value_l_b=bias(),
        value_r_w=conv_init(rng, spec), value_r_b=bias(),
        fuse_scale_l=bias(), fuse_scale_r=bias(),
    )


def named_deam(prefix: str, p: DeamParams) -> list[tuple[str, Tensor]]:
    """Canonical (name, tensor) pairs for one stage, in draw order."""
    return [
        (f"{prefix}.norm_l.gain", p.norm_l_gain),
        (f"{prefix}.norm_l.shift", p.norm_l_shift),
        (f"{prefix}.norm_r.gain", p.norm_r_gain),
        (f"{prefix}.norm_r.shift", p.norm_r_shift),
        (f"{prefix}.match_l.weight", p.match_l_w),
        (f"{prefix}.match_l.bias", p.match_l_b),
        (f"{prefix}.match_r.weight", p.match_r_w),
        (f"{prefix}.match_r.bias", p.match_r_b),
        (f"{prefix}.value_l.weight", p.value_l_w),
        (f"{prefix}.value_l.bias", p.value_l_b),
        (f"{prefix}.value_r.weight", p.value_r_w),
        (f"{prefix}.value_r.bias", p.value_r_b),
        (f"{prefix}.fuse_scale_l", p.fuse_scale_l),
        (f"{prefix}.fuse_scale_r", p.fuse_scale_r),
    ]


def deam_from(lookup, prefix: str) -> DeamParams:
    """Rebuild stage parameters from a name -> Tensor lookup callable."""
    return DeamParams(
        norm_l_gain=lookup(f"{prefix}.norm_l.gain"),
        norm_l_shift=lookup(f"{prefix}.norm_l.shift"),
        norm_r_gain=lookup(f"{prefix}.norm_r.gain"),
        norm_r_shift=lookup(f"{prefix}.norm_r.shift"),
        match_l_w=lookup(f"{prefix}.match_l.weight"),
        match_l_b=lookup(f"{prefix}.match_l.bias"),
        match_r_w=lookup(f"{prefix}.match_r.weight"),
        match_r_b=lookup(f"{prefix}.match_r.bias"),
        value_l_w=lookup(f"{prefix}.value_l.weight"),
        value_l_b=lookup(f"{prefix}.value_l.bias"),
        value_r_w=lookup(f"{prefix}.value_r.weight"),
        value_r_b=lookup(f"{prefix}.value_r.bias"),
        fuse_scale_l=lookup(f"{prefix}.fuse_scale_l"),
        fuse_scale_r=lookup(f"{prefix}.fuse_scale_r"),
    )
