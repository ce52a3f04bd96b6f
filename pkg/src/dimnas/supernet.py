"""U-Net macro-skeleton with weight sharing over candidate block ops.

The skeleton is fixed: stem conv, per encoder stage one searchable module
then a stride-2 conv doubling channels, a bottleneck module, and per decoder
stage a nearest x2 upsample + 1x1 conv halving channels, a summation skip
from the matching encoder stage, then one searchable module. A 1x1 head
maps to class scores. Every module position owns parameters for both conv
candidates of every subcell slot; a forward pass touches only the path the
genome selects.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dten
from .search_space import FixedBlock, Genome, OpKind, validate
from .tensor import (
    ConvParams,
    NormParams,
    ShapeError,
    Tensor,
    add,
    buffer,
    conv,
    norm,
    param,
    pool,
    relu,
    upsample,
)

__all__ = [
    "SupernetSpec",
    "ModelWeights",
    "init_search_weights",
    "init_baseline_weights",
    "forward",
    "forward_baseline",
    "extend_to_2d",
    "param_count",
    "save_weights",
    "load_weights",
    "module_positions",
]


@dataclass(frozen=True)
class SupernetSpec:
    rank: int = 1
    n_stages: int = 3
    base_channels: int = 16
    n_classes: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.rank not in (1, 2):
            raise ValueError(f"rank must be 1 or 2, got {self.rank}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_stages < 1:
            raise ValueError(f"n_stages must be >= 1, got {self.n_stages}")

    @property
    def channel_schedule(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.n_stages + 1))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetSpec":
        return cls(**d)


def module_positions(spec: SupernetSpec) -> list[tuple[str, int]]:
    """(name, channels) of every searchable module position, forward order."""
    out = [(f"enc{i}", spec.base_channels * 2**i) for i in range(spec.n_stages)]
    out.append(("mid", spec.base_channels * 2**spec.n_stages))
    out.extend((f"dec{i}", spec.base_channels * 2**i) for i in reversed(range(spec.n_stages)))
    return out


class ModelWeights:
    """Named parameter store: structured conv/norm handles over a flat
    tensor registry used for counting and checkpointing."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.convs: dict[str, ConvParams] = {}
        self.norms: dict[str, NormParams] = {}

    def add_conv(self, name: str, p: ConvParams) -> None:
        self.convs[name] = p
        self.tensors[name + ".w"] = p.kernel
        self.tensors[name + ".b"] = p.bias

    def add_norm(self, name: str, p: NormParams) -> None:
        self.norms[name] = p
        self.tensors[name + ".gamma"] = p.gamma
        self.tensors[name + ".beta"] = p.beta
        self.tensors[name + ".running_mean"] = p.running_mean
        self.tensors[name + ".running_var"] = p.running_var

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
             rank: int, stride: int = 1) -> ConvParams:
    shape = (out_ch, in_ch) + (k,) * rank
    fan_in = in_ch * k**rank
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return ConvParams(kernel=param(w), bias=param(np.zeros(out_ch)), stride=stride)


def _fresh_norm(channels: int) -> NormParams:
    return NormParams(
        gamma=param(np.ones(channels)),
        beta=param(np.zeros(channels)),
        running_mean=buffer(np.zeros(channels)),
        running_var=buffer(np.ones(channels)),
    )


def _add_conv_norm(w: ModelWeights, rng, name: str, out_ch: int, in_ch: int,
                   k: int, rank: int, stride: int = 1) -> None:
    w.add_conv(name, _he_conv(rng, out_ch, in_ch, k, rank, stride))
    w.add_norm(name + ".norm", _fresh_norm(out_ch))


_CONV_OPS = {OpKind.CONV3: ("conv3", 3), OpKind.CONV5: ("conv5", 5)}


def _init_scaffolding(w: ModelWeights, spec: SupernetSpec, rng) -> None:
    base, n, rank = spec.base_channels, spec.n_stages, spec.rank
    _add_conv_norm(w, rng, "stem", base, spec.in_channels, 3, rank)
    for i in range(n):
        ch = base * 2**i
        _add_conv_norm(w, rng, f"down{i}", 2 * ch, ch, 3, rank, stride=2)
    for i in reversed(range(n)):
        ch = base * 2**i
        _add_conv_norm(w, rng, f"up{i}", ch, 2 * ch, 1, rank)
    w.add_conv("head", _he_conv(rng, spec.n_classes, base, 1, rank))


def init_search_weights(spec: SupernetSpec, rng: np.random.Generator) -> ModelWeights:
    """Shared weights for every candidate op at every module position."""
    w = ModelWeights()
    _init_scaffolding(w, spec, rng)
    for pos, ch in module_positions(spec):
        for c in (1, 2):
            for s in (1, 2):
                for _, (op_name, k) in sorted(_CONV_OPS.items()):
                    _add_conv_norm(w, rng, f"{pos}.c{c}s{s}.{op_name}", ch, ch, k, spec.rank)
    return w


def init_baseline_weights(spec: SupernetSpec, rng: np.random.Generator,
                          block: FixedBlock | None = None) -> ModelWeights:
    """Weights for the fixed residual-block network (no candidate ops)."""
    block = block or FixedBlock(name="baseline_resnet")
    w = ModelWeights()
    _init_scaffolding(w, spec, rng)
    for pos, ch in module_positions(spec):
        for d in range(1, block.depth + 1):
            _add_conv_norm(w, rng, f"{pos}.res{d}", ch, ch, block.kernel, spec.rank)
    return w


def _crn(w: ModelWeights, name: str, x: Tensor, training: bool,
         update_stats: bool | None = None) -> Tensor:
    return relu(norm(conv(x, w.convs[name]), w.norms[name + ".norm"], training, update_stats))


def _subcell(w: ModelWeights, pos: str, cell: int, sub: int, op: OpKind,
             x: Tensor, training: bool, update_stats: bool | None) -> Tensor:
    if op in _CONV_OPS:
        return _crn(w, f"{pos}.c{cell}s{sub}.{_CONV_OPS[op][0]}", x, training, update_stats)
    if op == OpKind.AVGPOOL3:
        return pool(x, "avg")
    if op == OpKind.MAXPOOL3:
        return pool(x, "max")
    return x


def _module_forward(w: ModelWeights, pos: str, genome: Genome, x: Tensor,
                    training: bool, update_stats: bool | None = None) -> Tensor:
    # Cells are resolved lazily from the last cell down, so ops in cells the
    # genome never consumes stay off the tape entirely.
    memo: dict[int, Tensor] = {0: x}

    def value(idx: int) -> Tensor:
        if idx not in memo:
            genes = genome.cells[idx - 1]
            outs = [
                _subcell(w, pos, idx, s, gene.op, value(gene.input_sel), training,
                         update_stats)
                for s, gene in enumerate(genes, start=1)
            ]
            acc = outs[0]
            for o in outs[1:]:
                acc = add(acc, o)
            memo[idx] = acc
        return memo[idx]

    return value(len(genome.cells))


def _res_block(w: ModelWeights, pos: str, x: Tensor, training: bool,
               update_stats: bool | None = None, depth: int = 2) -> Tensor:
    y = x
    for d in range(1, depth + 1):
        y = _crn(w, f"{pos}.res{d}", y, training, update_stats)
    return add(x, y)


def _check_input(spec: SupernetSpec, x: Tensor) -> None:
    rank = x.ndim - 2
    if rank != spec.rank:
        raise ShapeError(f"input rank {rank} != network rank {spec.rank}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, expected {spec.in_channels}")
    factor = 2**spec.n_stages
    for s in x.shape[2:]:
        if s % factor != 0:
            raise ShapeError(f"spatial size {s} not divisible by 2^{spec.n_stages}")


def _unet(w: ModelWeights, spec: SupernetSpec, x: Tensor, training: bool,
          update_stats: bool | None, block_fn) -> Tensor:
    _check_input(spec, x)
    h = _crn(w, "stem", x, training, update_stats)
    skips = []
    for i in range(spec.n_stages):
        h = block_fn(f"enc{i}", h)
        skips.append(h)
        h = _crn(w, f"down{i}", h, training, update_stats)
    h = block_fn("mid", h)
    for i in reversed(range(spec.n_stages)):
        h = upsample(h)
        h = _crn(w, f"up{i}", h, training, update_stats)
        h = add(h, skips[i])
        h = block_fn(f"dec{i}", h)
    return conv(h, w.convs["head"])


def forward(w: ModelWeights, spec: SupernetSpec, genome: Genome, x: Tensor,
            training: bool = False, update_stats: bool | None = None) -> Tensor:
    """Class scores for the sub-network the genome selects; spatial shape is
    preserved and the channel axis becomes n_classes.

    ``training=True, update_stats=False`` runs with batch statistics but no
    state mutation, the mode used to score candidates on shared weights.
    """
    problems = validate(genome)
    if problems:
        raise ValueError("invalid genome: " + "; ".join(problems))
    return _unet(w, spec, x, training, update_stats,
                 lambda pos, h: _module_forward(w, pos, genome, h, training, update_stats))


def forward_baseline(w: ModelWeights, spec: SupernetSpec, x: Tensor,
                     training: bool = False, update_stats: bool | None = None) -> Tensor:
    """Class scores for the fixed residual-block network."""
    return _unet(w, spec, x, training, update_stats,
                 lambda pos, h: _res_block(w, pos, h, training, update_stats))


def extend_to_2d(genome: Genome, spec: SupernetSpec) -> tuple[Genome, SupernetSpec]:
    """Reuse a block design on 2D data: the genome is rank-free, kernels are
    extended isotropically (k -> k x k) by the rank-2 network. Weights are
    not transferred; the 2D network retrains from scratch."""
    problems = validate(genome)
    if problems:
        raise ValueError("invalid genome: " + "; ".join(problems))
    return genome, dataclasses.replace(spec, rank=2)


def param_count(w: ModelWeights) -> int:
    return sum(t.size for t in w.tensors.values() if t.requires_grad)


def save_weights(directory: str | Path, w: ModelWeights, spec: SupernetSpec,
                 mode: str, extra: dict | None = None) -> None:
    """Checkpoint as a manifest + one DTEN file per named tensor."""
    if mode not in ("search", "baseline"):
        raise ValueError(f"mode must be 'search' or 'baseline', got {mode!r}")
    meta = {"spec": spec.to_dict(), "mode": mode, "extra": extra or {}}
    dten.save_arrays(directory, {k: t.data for k, t in w.tensors.items()}, meta)


def load_weights(directory: str | Path) -> tuple[ModelWeights, SupernetSpec, str, dict]:
    arrays, meta = dten.load_arrays(directory)
    spec = SupernetSpec.from_dict(meta["spec"])
    mode = meta["mode"]
    rng = np.random.default_rng(0)
    w = init_search_weights(spec, rng) if mode == "search" else init_baseline_weights(spec, rng)
    expected = set(w.tensors)
    found = set(arrays)
    if expected != found:
        missing = sorted(expected - found)[:3]
        extra_names = sorted(found - expected)[:3]
        raise dten.DtenError(
            f"{directory}: checkpoint does not match spec "
            f"(missing {missing}, unexpected {extra_names})"
        )
    for name, t in w.tensors.items():
        if arrays[name].shape != t.data.shape:
            raise dten.DtenError(
                f"{name}: stored shape {arrays[name].shape} != spec shape {t.data.shape}"
            )
        t.data = arrays[name].astype(t.data.dtype)
        if t.requires_grad:
            t.grad = np.zeros_like(t.data)
    return w, spec, mode, meta.get("extra", {})
