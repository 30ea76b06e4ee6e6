"""Network assembly: shallow conv, stacked blocks with cross-view stages,
sub-pixel reconstruction head, and weight-store (de)serialization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import blocks as _blocks
from . import transport as _transport
from .blocks import LskaBranch, MscabParams, conv_init, default_branches, mscab_from, named_mscab
from .tensor import ConvSpec, ShapeError, Tensor, add, bilinear_upsample, conv2d, pixel_shuffle
from .transport import DeamParams, SinkhornConfig, deam_from, named_deam

MAGIC = b"MSIN"
FORMAT_VERSION = 1

_FLAG_SHARE_VIEW_WEIGHTS = 1
_FLAG_SINGLE_INTERACTION = 2
_FLAG_GLOBAL_RESIDUAL = 4
_KNOWN_FLAGS = _FLAG_SHARE_VIEW_WEIGHTS | _FLAG_SINGLE_INTERACTION | _FLAG_GLOBAL_RESIDUAL


class WeightFormatError(ValueError):
    """A weight file failed validation."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``single_interaction`` keeps only one cross-view stage, after the final
    block, instead of one per block.  ``global_residual`` adds a bilinear
    upsample of the input to the reconstruction.
    """

    n_blocks: int = 32
    width: int = 48
    scale: int = 4
    lska_branches: tuple[LskaBranch, ...] = field(default_factory=default_branches)
    sinkhorn_iters: int = 10
    share_view_weights: bool = True
    single_interaction: bool = False
    global_residual: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.width < 4 or self.width % 2:
            raise ValueError(f"width must be even and >= 4, got {self.width}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if not self.lska_branches:
            raise ValueError("at least one LSKA branch is required")
        if self.sinkhorn_iters < 1:
            raise ValueError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")

    def sinkhorn_config(self) -> SinkhornConfig:
        return SinkhornConfig(iters=self.sinkhorn_iters)

    def deam_stages(self) -> tuple[int, ...]:
        """Block indices after which a cross-view stage runs."""
        if self.single_interaction:
            return (self.n_blocks - 1,)
        return tuple(range(self.n_blocks))


@dataclass(frozen=True)
class StereoPair:
    """Left/right tensors kept in lockstep through the network."""

    left: Tensor
    right: Tensor

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ShapeError(
                f"stereo views must share a shape: {self.left.shape} vs {self.right.shape}"
            )


class WeightStore:
    """Ordered map of canonical parameter names to tensors.

    Carries the :class:`ModelConfig` it was built for, so a saved file is
    self-describing.  Names are unique; insertion order is the canonical
    parameter order used by the optimizer and the file format.
    """

    def __init__(self, config: ModelConfig, items=()):
        self.config = config
        self._params: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise WeightFormatError(f"duplicate parameter name: {name}")
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    @property
    def param_count(self) -> int:
        return sum(t.numel for t in self._params.values())

    def replace_values(self, tensors) -> "WeightStore":
        """Same names and config, new tensors (given in canonical order)."""
        tensors = list(tensors)
        if len(tensors) != len(self._params):
            raise ShapeError(f"expected {len(self._params)} tensors, got {len(tensors)}")
        out = WeightStore(self.config)
        for name, t in zip(self._params, tensors):
            if t.shape != self._params[name].shape:
                raise ShapeError(
                    f"{name}: shape {t.shape} != expected {self._params[name].shape}"
                )
            out.add(name, t)
        return out

    def astype(self, dtype) -> "WeightStore":
        return self.replace_values(t.astype(dtype) for t in self.tensors())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _head_out_channels(cfg: ModelConfig) -> int:
    return 3 * cfg.scale * cfg.scale


def _view_prefixes(cfg: ModelConfig) -> tuple[str, ...]:
    return ("",) if cfg.share_view_weights else ("left.", "right.")


def init_model(cfg: ModelConfig, seed: int) -> WeightStore:
    """Deterministic initialization: same seed + config -> identical store.

    Conv weights are uniform(-k, k) with k = 1/sqrt(fan_in); biases and
    norm shifts are zero; norm gains and block residual scales are one; all
    cross-view fusion scales are exactly zero.
    """
    rng = np.random.default_rng(seed)
    store = WeightStore(cfg)
    for view in _view_prefixes(cfg):
        intro = ConvSpec(out_ch=cfg.width, in_ch=3, kh=3, kw=3)
        store.add(f"{view}intro.weight", conv_init(rng, intro))
        store.add(f"{view}intro.bias", Tensor(np.zeros((1, cfg.width, 1, 1), np.float32)))
        for i in range(cfg.n_blocks):
            p = _blocks.init_mscab(cfg.width, cfg.lska_branches, rng)
            for name, t in named_mscab(f"{view}block.{i}", p):
                store.add(name, t)
        head = ConvSpec(out_ch=_head_out_channels(cfg), in_ch=cfg.width, kh=3, kw=3)
        store.add(f"{view}head.weight", conv_init(rng, head))
        store.add(f"{view}head.bias", Tensor(np.zeros((1, head.out_ch, 1, 1), np.float32)))
    for i in cfg.deam_stages():
        for name, t in named_deam(f"deam.{i}", _transport.init_deam(cfg.width, rng)):
            store.add(name, t)
    return store


def _block_params(store: WeightStore, cfg: ModelConfig, view: str, i: int) -> MscabParams:
    return mscab_from(store.__getitem__, f"{view}block.{i}", cfg.width, cfg.lska_branches)


def _deam_params(store: WeightStore, i: int) -> DeamParams:
    return deam_from(store.__getitem__, f"deam.{i}")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def forward(pair: StereoPair, store: WeightStore, cfg: ModelConfig | None = None) -> StereoPair:
    """Run the network on a low-resolution pair in [0, 1].

    Per view: shallow 3x3 conv, then the block stack with cross-view stages
    interleaved, then a 3x3 conv + sub-pixel upsample.  With the global
    residual enabled the bilinear upsample of the input is added, so the
    stack only has to produce the high-frequency residue.  Output spatial
    size is exactly (scale*h, scale*w).
    """
    if cfg is None:
        cfg = store.config
    if pair.left.c != 3:
        raise ShapeError(f"expected 3-channel input images, got {pair.left.c} channels")

    views = _view_prefixes(cfg)
    left_view, right_view = (views[0], views[0]) if len(views) == 1 else views
    intro = ConvSpec(out_ch=cfg.width, in_ch=3, kh=3, kw=3)
    x_l = conv2d(pair.left, intro, store[f"{left_view}intro.weight"], store[f"{left_view}intro.bias"])
    x_r = conv2d(pair.right, intro, store[f"{right_view}intro.weight"], store[f"{right_view}intro.bias"])

    deam_at = set(cfg.deam_stages())
    sk = cfg.sinkhorn_config()
    for i in range(cfg.n_blocks):
        x_l = _blocks.mscab_forward(x_l, _block_params(store, cfg, left_view, i))
        x_r = _blocks.mscab_forward(x_r, _block_params(store, cfg, right_view, i))
        if i in deam_at:
            x_l, x_r, _ = _transport.deam_forward(x_l, x_r, _deam_params(store, i), sk)

    head = ConvSpec(out_ch=_head_out_channels(cfg), in_ch=cfg.width, kh=3, kw=3)
    y_l = pixel_shuffle(conv2d(x_l, head, store[f"{left_view}head.weight"], store[f"{left_view}head.bias"]), cfg.scale)
    y_r = pixel_shuffle(conv2d(x_r, head, store[f"{right_view}head.weight"], store[f"{right_view}head.bias"]), cfg.scale)
    if cfg.global_residual:
        y_l = add(y_l, bilinear_upsample(pair.left, cfg.scale))
        y_r = add(y_r, bilinear_upsample(pair.right, cfg.scale))
    return StereoPair(left=y_l, right=y_r)


# ---------------------------------------------------------------------------
# Serialization (little-endian, no padding)
#
#   magic "MSIN" | version u32 | n_blocks u32 | width u32 | scale u32
#   | branch_count u32 | per branch: base_k u32, dilated_k u32, dilation u32
#   | sinkhorn_iters u32 | flags u32 | tensor_count u32
#   | per tensor: name_len u16, utf-8 name, rank u8, dims u32 x rank,
#     raw float32 values
# ---------------------------------------------------------------------------

def _config_flags(cfg: ModelConfig) -> int:
    flags = 0
    if cfg.share_view_weights:
        flags |= _FLAG_SHARE_VIEW_WEIGHTS
    if cfg.single_interaction:
        flags |= _FLAG_SINGLE_INTERACTION
    if cfg.global_residual:
        flags |= _FLAG_GLOBAL_RESIDUAL
    return flags


def save_weights(store: WeightStore, path) -> None:
    """Write the store to ``path`` in the self-describing binary format."""
    cfg = store.config
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<IIII", cfg.n_blocks, cfg.width, cfg.scale, len(cfg.lska_branches))
    for br in cfg.lska_branches:
        out += struct.pack("<III", br.base_k, br.dilated_k, br.dilation)
    out += struct.pack("<II", cfg.sinkhorn_iters, _config_flags(cfg))
    out += struct.pack("<I", len(store))
    for name, t in store.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", len(t.shape))
        out += struct.pack(f"<{len(t.shape)}I", *t.shape)
        out += t.data.astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise WeightFormatError(
                f"truncated weight file: wanted {count} bytes at offset {self.pos}, "
                f"only {len(self.blob) - self.pos} remain"
            )
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> WeightStore:
    """Read a weight file, validating magic, version, flags and layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise WeightFormatError(f"bad magic bytes; not a weight file: {path}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    n_blocks, width, scale, branch_count = r.unpack("<IIII")
    branches = tuple(LskaBranch(*r.unpack("<III")) for _ in range(branch_count))
    sinkhorn_iters, flags = r.unpack("<II")
    if flags & ~_KNOWN_FLAGS:
        raise WeightFormatError(f"unknown config flag bits: {flags:#x}")
    try:
        cfg = ModelConfig(
            n_blocks=n_blocks, width=width, scale=scale, lska_branches=branches,
            sinkhorn_iters=sinkhorn_iters,
            share_view_weights=bool(flags & _FLAG_SHARE_VIEW_WEIGHTS),
            single_interaction=bool(flags & _FLAG_SINGLE_INTERACTION),
            global_residual=bool(flags & _FLAG_GLOBAL_RESIDUAL),
        )
    except ValueError as e:
        raise WeightFormatError(f"invalid config block: {e}") from e

    (tensor_count,) = r.unpack("<I")
    store = WeightStore(cfg)
    for _ in range(tensor_count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * numel)
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        try:
            store.add(name, Tensor(data))
        except ShapeError as e:
            raise WeightFormatError(f"tensor {name!r}: {e}") from e
    if r.pos != len(blob):
        raise WeightFormatError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return store
