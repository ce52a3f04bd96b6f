"""Genome encoding of a searchable module block.

A module block is a small DAG of 2 cells, each summing the outputs of its
2 subcells. A subcell picks one input (0 = module input, i >= 1 = output of
cell i) and one of five operations. The block design is rank-free: the same
genome instantiates 1D or 2D kernels depending on the network it runs in.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = [
    "OpKind",
    "SubcellGene",
    "Genome",
    "SearchSpaceSpec",
    "FixedBlock",
    "GenomeFormatError",
    "DEFAULT_SPACE",
    "validate",
    "enumerate_genomes",
    "encode",
    "decode",
    "preset",
    "random_genome",
]


class OpKind(enum.IntEnum):
    CONV3 = 0
    CONV5 = 1
    AVGPOOL3 = 2
    MAXPOOL3 = 3
    IDENTITY = 4


OP_NAMES = {
    OpKind.CONV3: "conv3",
    OpKind.CONV5: "conv5",
    OpKind.AVGPOOL3: "avgpool3",
    OpKind.MAXPOOL3: "maxpool3",
    OpKind.IDENTITY: "identity",
}
NAME_TO_OP = {v: k for k, v in OP_NAMES.items()}


class GenomeFormatError(ValueError):
    """Raised when genome text cannot be parsed into a valid genome."""


@dataclass(frozen=True)
class SubcellGene:
    input_sel: int
    op: OpKind


@dataclass(frozen=True)
class Genome:
    """Per cell, per subcell: an input selector and an operation."""

    cells: tuple[tuple[SubcellGene, ...], ...]


@dataclass(frozen=True)
class SearchSpaceSpec:
    n_cells: int = 2
    n_subcells: int = 2
    ops: tuple[OpKind, ...] = tuple(OpKind)

    @property
    def cardinality(self) -> int:
        total = 1
        for cell in range(1, self.n_cells + 1):
            total *= (cell * len(self.ops)) ** self.n_subcells
        return total


DEFAULT_SPACE = SearchSpaceSpec()


@dataclass(frozen=True)
class FixedBlock:
    """A hand-designed block outside the genome vocabulary.

    The residual baseline block: ``depth`` conv stages of size ``kernel``
    (each conv -> norm -> relu) summed with the block input.
    """

    name: str
    kernel: int = 3
    depth: int = 2
    residual: bool = True


def validate(genome: Genome, spec: SearchSpaceSpec = DEFAULT_SPACE) -> list[str]:
    """Return all invariant violations; an empty list means valid."""
    problems: list[str] = []
    if len(genome.cells) != spec.n_cells:
        problems.append(f"expected {spec.n_cells} cells, got {len(genome.cells)}")
    for ci, cell in enumerate(genome.cells, start=1):
        if len(cell) != spec.n_subcells:
            problems.append(f"cell {ci}: expected {spec.n_subcells} subcells, got {len(cell)}")
        for si, gene in enumerate(cell, start=1):
            if not isinstance(gene.op, OpKind) or gene.op not in spec.ops:
                problems.append(f"cell {ci} subcell {si}: unknown op {gene.op!r}")
            if not 0 <= gene.input_sel < ci:
                problems.append(
                    f"cell {ci} subcell {si}: input {gene.input_sel} out of range "
                    f"(cell {ci} may only reference the module input or cells below {ci})"
                )
    return problems


def enumerate_genomes(spec: SearchSpaceSpec = DEFAULT_SPACE) -> Iterator[Genome]:
    """All genomes in lexicographic (cell, subcell, input_sel, op) order."""
    slot_choices = []
    for cell in range(1, spec.n_cells + 1):
        options = [
            SubcellGene(sel, op) for sel in range(cell) for op in spec.ops
        ]
        slot_choices.extend([options] * spec.n_subcells)
    for combo in itertools.product(*slot_choices):
        cells = tuple(
            tuple(combo[c * spec.n_subcells : (c + 1) * spec.n_subcells])
            for c in range(spec.n_cells)
        )
        yield Genome(cells)


def random_genome(rng: np.random.Generator, spec: SearchSpaceSpec = DEFAULT_SPACE) -> Genome:
    """Uniform sample over the legal genome space."""
    cells = []
    for cell in range(1, spec.n_cells + 1):
        genes = tuple(
            SubcellGene(int(rng.integers(cell)), spec.ops[int(rng.integers(len(spec.ops)))])
            for _ in range(spec.n_subcells)
        )
        cells.append(genes)
    return Genome(tuple(cells))


def encode(genome: Genome) -> str:
    """Canonical JSON text; byte-stable for identical genomes."""
    obj = {
        "cells": [
            {"subcells": [{"input": g.input_sel, "op": OP_NAMES[g.op]} for g in cell]}
            for cell in genome.cells
        ]
    }
    return json.dumps(obj, indent=2) + "\n"


def decode(text: str, spec: SearchSpaceSpec = DEFAULT_SPACE) -> Genome:
    """Parse genome JSON; rejects malformed text, unknown ops, bad selectors."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise GenomeFormatError(f"invalid JSON at position {e.pos}: {e.msg}") from e
    if not isinstance(obj, dict) or "cells" not in obj:
        raise GenomeFormatError('expected a JSON object with a "cells" list')
    cells = []
    for ci, cell_obj in enumerate(obj["cells"], start=1):
        subs = cell_obj.get("subcells") if isinstance(cell_obj, dict) else None
        if not isinstance(subs, list):
            raise GenomeFormatError(f'cell {ci}: expected a "subcells" list')
        genes = []
        for si, sub in enumerate(subs, start=1):
            if not isinstance(sub, dict) or "input" not in sub or "op" not in sub:
                raise GenomeFormatError(f'cell {ci} subcell {si}: expected {{"input", "op"}}')
            op_name = sub["op"]
            if op_name not in NAME_TO_OP:
                raise GenomeFormatError(
                    f"cell {ci} subcell {si}: unknown op {op_name!r} "
                    f"(choose from {sorted(NAME_TO_OP)})"
                )
            sel = sub["input"]
            if not isinstance(sel, int) or isinstance(sel, bool):
                raise GenomeFormatError(f"cell {ci} subcell {si}: input must be an integer")
            genes.append(SubcellGene(sel, NAME_TO_OP[op_name]))
        cells.append(tuple(genes))
    genome = Genome(tuple(cells))
    problems = validate(genome, spec)
    if problems:
        raise GenomeFormatError("; ".join(problems))
    return genome


# Block designs published alongside the method. The two searched blocks are
# only available as a schematic; the transcriptions below are placeholders
# with the right structure, shipped so the preset surface is exercisable.
_PRESETS: dict[str, Genome | FixedBlock] = {
    "baseline_resnet": FixedBlock(name="baseline_resnet", kernel=3, depth=2, residual=True),
    "enas_block_a": Genome(
        (
            (SubcellGene(0, OpKind.CONV5), SubcellGene(0, OpKind.MAXPOOL3)),
            (SubcellGene(1, OpKind.CONV3), SubcellGene(1, OpKind.IDENTITY)),
        )
    ),
    "enas_block_b": Genome(
        (
            (SubcellGene(0, OpKind.CONV3), SubcellGene(0, OpKind.AVGPOOL3)),
            (SubcellGene(1, OpKind.CONV5), SubcellGene(0, OpKind.IDENTITY)),
        )
    ),
}


def preset(name: str) -> Genome | FixedBlock:
    """Named block presets: the residual baseline and two searched blocks.

    ``enas_block_a``/``enas_block_b`` are transcribed-from-figure
    placeholders (the source schematic is not machine-readable); treat them
    as representative searched blocks, not authoritative ones.
    """
    try:
        return _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}") from None
