"""Intra-view feature blocks: multi-scale spatial-channel attention + SFFN.

Each block (MSCAB) is two residual sub-blocks.  The first (MSCAM) combines
simplified channel attention with multi-scale large-separable-kernel spatial
attention; the second (SFFN) is an activation-free feed-forward.  The only
nonlinearity anywhere is the simple gate (channel-split product).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvSpec, Tensor, add, conv2d, global_avg_pool, layer_norm, mul, simple_gate

DEFAULT_LSKA_BRANCHES = (
    # small / medium / large effective fields: 7, 23, 35
    (3, 3, 2),
    (5, 7, 3),
    (5, 11, 3),
)


@dataclass(frozen=True)
class LskaBranch:
    """One large-separable-kernel branch.

    Four depthwise convolutions: 1 x base_k, base_k x 1, then a dilated
    1 x dilated_k, dilated_k x 1 pair.  The effective receptive field is
    base_k + (dilated_k - 1) * dilation, kept odd by requiring odd kernels.
    """

    base_k: int
    dilated_k: int
    dilation: int

    def __post_init__(self):
        if self.base_k < 1 or self.base_k % 2 == 0:
            raise ValueError(f"base_k must be odd and positive, got {self.base_k}")
        if self.dilated_k < 1 or self.dilated_k % 2 == 0:
            raise ValueError(f"dilated_k must be odd and positive, got {self.dilated_k}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def effective_field(self) -> int:
        return self.base_k + (self.dilated_k - 1) * self.dilation


def default_branches() -> tuple[LskaBranch, ...]:
    return tuple(LskaBranch(*b) for b in DEFAULT_LSKA_BRANCHES)


@dataclass(frozen=True)
class LskaBranchParams:
    """Weights for one branch's four depthwise convolutions."""

    branch: LskaBranch
    local_h_w: Tensor
    local_h_b: Tensor
    local_v_w: Tensor
    local_v_b: Tensor
    dilated_h_w: Tensor
    dilated_h_b: Tensor
    dilated_v_w: Tensor
    dilated_v_b: Tensor


@dataclass(frozen=True)
class MscabParams:
    """All weights of one block, MSCAM half then SFFN half."""

    width: int
    norm1_gain: Tensor
    norm1_shift: Tensor
    expand_w: Tensor          # 1x1, C -> 2C
    expand_b: Tensor
    dwconv_w: Tensor          # 3x3 depthwise on 2C
    dwconv_b: Tensor
    lska: tuple[LskaBranchParams, ...]
    fuse_w: Tensor            # 1x1, C -> C, shared across branches
    fuse_b: Tensor
    sca_w: Tensor             # 1x1, C -> C, on pooled statistics
    sca_b: Tensor
    project_w: Tensor         # 1x1, C -> C
    project_b: Tensor
    attn_res_scale: Tensor    # per-channel residual scale of the MSCAM half
    norm2_gain: Tensor
    norm2_shift: Tensor
    ffn_expand_w: Tensor      # 1x1, C -> 2C
    ffn_expand_b: Tensor
    ffn_project_w: Tensor     # 1x1, C -> C
    ffn_project_b: Tensor
    ffn_res_scale: Tensor     # per-channel residual scale of the SFFN half


def _conv1x1(c_in: int, c_out: int) -> ConvSpec:
    return ConvSpec(out_ch=c_out, in_ch=c_in, kh=1, kw=1)


def _dw(c: int, kh: int, kw: int, dilation=(1, 1)) -> ConvSpec:
    return ConvSpec(out_ch=c, in_ch=c, kh=kh, kw=kw, groups=c, dilation=dilation)


def sca(y: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Simplified channel attention: pool to per-channel statistics, mix with
    a 1x1 convolution, and rescale the input channels.  No nonlinearity."""
    s = conv2d(global_avg_pool(y), _conv1x1(y.c, y.c), w, b)
    return mul(y, s)


def _lska_branch(y: Tensor, p: LskaBranchParams) -> Tensor:
    c, k, dk, d = y.c, p.branch.base_k, p.branch.dilated_k, p.branch.dilation
    t = conv2d(y, _dw(c, 1, k), p.local_h_w, p.local_h_b)
    t = conv2d(t, _dw(c, k, 1), p.local_v_w, p.local_v_b)
    t = conv2d(t, _dw(c, 1, dk, dilation=(1, d)), p.dilated_h_w, p.dilated_h_b)
    t = conv2d(t, _dw(c, dk, 1, dilation=(d, 1)), p.dilated_v_w, p.dilated_v_b)
    return t


def mslska(y: Tensor, branches: tuple[LskaBranchParams, ...], fuse_w: Tensor,
           fuse_b: Tensor) -> Tensor:
    """Multi-scale large separable kernel attention: sum the branch outputs,
    mix with a shared 1x1 convolution, and gate the input with the result."""
    if not branches:
        raise ValueError("mslska needs at least one branch")
    acc = _lska_branch(y, branches[0])
    for p in branches[1:]:
        acc = add(acc, _lska_branch(y, p))
    attn = conv2d(acc, _conv1x1(y.c, y.c), fuse_w, fuse_b)
    return mul(y, attn)


def mscam(x: Tensor, p: MscabParams) -> Tensor:
    """Attention half of the block: norm, expand, depthwise 3x3, gate, then
    spatial and channel attention in sequence, project, scaled residual."""
    c = p.width
    y = layer_norm(x, p.norm1_gain, p.norm1_shift)
    y = conv2d(y, _conv1x1(c, 2 * c), p.expand_w, p.expand_b)
    y = conv2d(y, _dw(2 * c, 3, 3), p.dwconv_w, p.dwconv_b)
    y = simple_gate(y)
    y = mslska(y, p.lska, p.fuse_w, p.fuse_b)
    y = sca(y, p.sca_w, p.sca_b)
    y = conv2d(y, _conv1x1(c, c), p.project_w, p.project_b)
    return add(x, mul(p.attn_res_scale, y))


def sffn(x: Tensor, p: MscabParams) -> Tensor:
    """Feed-forward half: norm, expand to 2C, gate back to C, project,
    scaled residual."""
    c = p.width
    y = layer_norm(x, p.norm2_gain, p.norm2_shift)
    y = conv2d(y, _conv1x1(c, 2 * c), p.ffn_expand_w, p.ffn_expand_b)
    y = simple_gate(y)
    y = conv2d(y, _conv1x1(c, c), p.ffn_project_w, p.ffn_project_b)
    return add(x, mul(p.ffn_res_scale, y))


def mscab_forward(x: Tensor, p: MscabParams) -> Tensor:
    """One full block: MSCAM followed by SFFN."""
    return sffn(mscam(x, p), p)


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def conv_init(rng: np.random.Generator, spec: ConvSpec, dtype=np.float32) -> Tensor:
    """Uniform(-k, k) weights with k = 1/sqrt(fan_in)."""
    fan_in = (spec.in_ch // spec.groups) * spec.kh * spec.kw
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=spec.weight_shape).astype(dtype))


def _bias(c: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((1, c, 1, 1), dtype=dtype))


def _channel_const(c: int, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, c, 1, 1), value, dtype=dtype))


def init_lska_branch(c: int, branch: LskaBranch, rng: np.random.Generator) -> LskaBranchParams:
    k, dk, d = branch.base_k, branch.dilated_k, branch.dilation
    return LskaBranchParams(
        branch=branch,
        local_h_w=conv_init(rng, _dw(c, 1, k)), local_h_b=_bias(c),
        local_v_w=conv_init(rng, _dw(c, k, 1)), local_v_b=_bias(c),
        dilated_h_w=conv_init(rng, _dw(c, 1, dk, dilation=(1, d))), dilated_h_b=_bias(c),
        dilated_v_w=conv_init(rng, _dw(c, dk, 1, dilation=(d, 1))), dilated_v_b=_bias(c),
    )


def init_mscab(c: int, branches: tuple[LskaBranch, ...], rng: np.random.Generator) -> MscabParams:
    """Fresh block parameters: unit norm gains, zero shifts/biases, unit
    residual scales, uniform fan-in conv weights.  Draw order is fixed so a
    seeded generator reproduces the block bit-for-bit."""
    return MscabParams(
        width=c,
        norm1_gain=_channel_const(c, 1.0), norm1_shift=_bias(c),
        expand_w=conv_init(rng, _conv1x1(c, 2 * c)), expand_b=_bias(2 * c),
        dwconv_w=conv_init(rng, _dw(2 * c, 3, 3)), dwconv_b=_bias(2 * c),
        lska=tuple(init_lska_branch(c, br, rng) for br in branches),
        fuse_w=conv_init(rng, _conv1x1(c, c)), fuse_b=_bias(c),
        sca_w=conv_init(rng, _conv1x1(c, c)), sca_b=_bias(c),
        project_w=conv_init(rng, _conv1x1(c, c)), project_b=_bias(c),
        attn_res_scale=_channel_const(c, 1.0),
        norm2_gain=_channel_const(c, 1.0), norm2_shift=_bias(c),
        ffn_expand_w=conv_init(rng, _conv1x1(c, 2 * c)), ffn_expand_b=_bias(2 * c),
        ffn_project_w=conv_init(rng, _conv1x1(c, c)), ffn_project_b=_bias(c),
        ffn_res_scale=_channel_const(c, 1.0),
    )


def named_mscab(prefix: str, p: MscabParams) -> list[tuple[str, Tensor]]:
    """Canonical (name, tensor) pairs for one block, in draw order."""
    items = [
        (f"{prefix}.mscam.norm.gain", p.norm1_gain),
        (f"{prefix}.mscam.norm.shift", p.norm1_shift),
        (f"{prefix}.mscam.expand.weight", p.expand_w),
        (f"{prefix}.mscam.expand.bias", p.expand_b),
        (f"{prefix}.mscam.dwconv.weight", p.dwconv_w),
        (f"{prefix}.mscam.dwconv.bias", p.dwconv_b),
    ]
    for j, br in enumerate(p.lska):
        items += [
            (f"{prefix}.mscam.lska.{j}.local_h.weight", br.local_h_w),
            (f"{prefix}.mscam.lska.{j}.local_h.bias", br.local_h_b),
            (f"{prefix}.mscam.lska.{j}.local_v.weight", br.local_v_w),
            (f"{prefix}.mscam.lska.{j}.local_v.bias", br.local_v_b),
            (f"{prefix}.mscam.lska.{j}.dilated_h.weight", br.dilated_h_w),
            (f"{prefix}.mscam.lska.{j}.dilated_h.bias", br.dilated_h_b),
            (f"{prefix}.mscam.lska.{j}.dilated_v.weight", br.dilated_v_w),
            (f"{prefix}.mscam.lska.{j}.dilated_v.bias", br.dilated_v_b),
        ]
    items += [
        (f"{prefix}.mscam.lska.fuse.weight", p.fuse_w),
        (f"{prefix}.mscam.lska.fuse.bias", p.fuse_b),
        (f"{prefix}.mscam.sca.weight", p.sca_w),
        (f"{prefix}.mscam.sca.bias", p.sca_b),
        (f"{prefix}.mscam.project.weight", p.project_w),
        (f"{prefix}.mscam.project.bias", p.project_b),
        (f"{prefix}.mscam.res_scale", p.attn_res_scale),
        (f"{prefix}.sffn.norm.gain", p.norm2_gain),
        (f"{prefix}.sffn.norm.shift", p.norm2_shift),
        (f"{prefix}.sffn.expand.weight", p.ffn_expand_w),
        (f"{prefix}.sffn.expand.bias", p.ffn_expand_b),
        (f"{prefix}.sffn.project.weight", p.ffn_project_w),
        (f"{prefix}.sffn.project.bias", p.ffn_project_b),
        (f"{prefix}.sffn.res_scale", p.ffn_res_scale),
    ]
    return items


def mscab_from(lookup, prefix: str, width: int,
               branches: tuple[LskaBranch, ...]) -> MscabParams:
    """Rebuild block parameters from a name -> Tensor lookup callable."""
    lska = tuple(
        LskaBranchParams(
            branch=br,
            local_h_w=lookup(f"{prefix}.mscam.lska.{j}.local_h.weight"),
            local_h_b=lookup(f"{prefix}.mscam.lska.{j}.local_h.bias"),
            local_v_w=lookup(f"{prefix}.mscam.lska.{j}.local_v.weight"),
            local_v_b=lookup(f"{prefix}.mscam.lska.{j}.local_v.bias"),
            dilated_h_w=lookup(f"{prefix}.mscam.lska.{j}.dilated_h.weight"),
            dilated_h_b=lookup(f"{prefix}.mscam.lska.{j}.dilated_h.bias"),
            dilated_v_w=lookup(f"{prefix}.mscam.lska.{j}.dilated_v.weight"),
            dilated_v_b=lookup(f"{prefix}.mscam.lska.{j}.dilated_v.bias"),
        )
        for j, br in enumerate(branches)
    )
    return MscabParams(
        width=width,
        norm1_gain=lookup(f"{prefix}.mscam.norm.gain"),
        norm1_shift=lookup(f"{prefix}.mscam.norm.shift"),
        expand_w=lookup(f"{prefix}.mscam.expand.weight"),
        expand_b=lookup(f"{prefix}.mscam.expand.bias"),
        dwconv_w=lookup(f"{prefix}.mscam.dwconv.weight"),
        dwconv_b=lookup(f"{prefix}.mscam.dwconv.bias"),
        lska=lska,
        fuse_w=lookup(f"{prefix}.mscam.lska.fuse.weight"),
        fuse_b=lookup(f"{prefix}.mscam.lska.fuse.bias"),
        sca_w=lookup(f"{prefix}.mscam.sca.weight"),
        sca_b=lookup(f"{prefix}.mscam.sca.bias"),
        project_w=lookup(f"{prefix}.mscam.project.weight"),
        project_b=lookup(f"{prefix}.mscam.project.bias"),
        attn_res_scale=lookup(f"{prefix}.mscam.res_scale"),
        norm2_gain=lookup(f"{prefix}.sffn.norm.gain"),
        norm2_shift=lookup(f"{prefix}.sffn.norm.shift"),
        ffn_expand_w=lookup(f"{prefix}.sffn.expand.weight"),
        ffn_expand_b=lookup(f"{prefix}.sffn.expand.bias"),
        ffn_project_w=lookup(f"{prefix}.sffn.project.weight"),
        ffn_project_b=lookup(f"{prefix}.sffn.project.bias"),
        ffn_res_scale=lookup(f"{prefix}.sffn.res_scale"),
    )
