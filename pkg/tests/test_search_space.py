"""Genome encoding, validation, enumeration and serialization tests."""

import numpy as np
import pytest

from dimnas.search_space import (
    DEFAULT_SPACE,
    FixedBlock,
    Genome,
    GenomeFormatError,
    OpKind,
    SubcellGene,
    decode,
    encode,
    enumerate_genomes,
    preset,
    random_genome,
    validate,
)


def make(c1s1, c1s2, c2s1, c2s2):
    return Genome((
        (SubcellGene(*c1s1), SubcellGene(*c1s2)),
        (SubcellGene(*c2s1), SubcellGene(*c2s2)),
    ))


ALL_IDENTITY = make((0, OpKind.IDENTITY), (0, OpKind.IDENTITY),
                    (0, OpKind.IDENTITY), (0, OpKind.IDENTITY))


class TestOpKind:
    def test_exactly_five_stable_ids(self):
        assert [op.value for op in OpKind] == [0, 1, 2, 3, 4]
        assert [op.name for op in OpKind] == [
            "CONV3", "CONV5", "AVGPOOL3", "MAXPOOL3", "IDENTITY"]


class TestValidate:
    def test_cell1_cannot_reference_itself(self):
        g = make((1, OpKind.CONV3), (0, OpKind.CONV3), (0, OpKind.CONV3), (0, OpKind.CONV3))
        problems = validate(g)
        assert len(problems) == 1 and "cell 1" in problems[0]

    def test_all_identity_valid(self):
        assert validate(ALL_IDENTITY) == []

    def test_three_cells_rejected(self):
        g = Genome(((SubcellGene(0, OpKind.CONV3), SubcellGene(0, OpKind.CONV3)),) * 3)
        assert any("2 cells" in p for p in validate(g))

    def test_never_raises(self):
        g = Genome(())
        assert isinstance(validate(g), list)


class TestEnumeration:
    def test_cardinality_closed_form_and_exhaustive(self):
        assert DEFAULT_SPACE.cardinality == (1 * 5) ** 2 * (2 * 5) ** 2 == 2500
        genomes = list(enumerate_genomes())
        assert len(genomes) == 2500
        assert len(set(genomes)) == 2500

    def test_first_genome_is_minimal(self):
        first = next(iter(enumerate_genomes()))
        assert first == make((0, OpKind.CONV3), (0, OpKind.CONV3),
                             (0, OpKind.CONV3), (0, OpKind.CONV3))

    def test_all_enumerated_valid_and_acyclic(self):
        for g in enumerate_genomes():
            assert validate(g) == []
            for ci, cell in enumerate(g.cells, start=1):
                for gene in cell:
                    assert gene.input_sel < ci

    def test_lexicographic_order(self):
        genomes = list(enumerate_genomes())
        keys = [tuple((gene.input_sel, int(gene.op)) for cell in g.cells for gene in cell)
                for g in genomes]
        assert keys == sorted(keys)


class TestCodec:
    def test_round_trip_all_enumerated(self):
        for g in enumerate_genomes():
            assert decode(encode(g)) == g

    def test_encode_byte_stable(self):
        g = make((0, OpKind.CONV5), (0, OpKind.MAXPOOL3), (1, OpKind.CONV3), (0, OpKind.IDENTITY))
        assert encode(g).encode() == encode(g).encode()

    def test_unknown_op_rejected(self):
        with pytest.raises(GenomeFormatError, match="conv7"):
            decode('{"cells": [{"subcells": [{"input": 0, "op": "conv7"},'
                   ' {"input": 0, "op": "conv3"}]},'
                   ' {"subcells": [{"input": 0, "op": "conv3"}, {"input": 0, "op": "conv3"}]}]}')

    def test_out_of_range_input_rejected(self):
        text = encode(ALL_IDENTITY).replace('"input": 0', '"input": 3', 1)
        with pytest.raises(GenomeFormatError, match="out of range"):
            decode(text)

    def test_malformed_json_reports_position(self):
        with pytest.raises(GenomeFormatError, match="position"):
            decode('{"cells": [')

    def test_non_object_rejected(self):
        with pytest.raises(GenomeFormatError):
            decode("[1, 2, 3]")


class TestPresets:
    def test_baseline_is_fixed_block(self):
        block = preset("baseline_resnet")
        assert isinstance(block, FixedBlock)
        assert block.kernel == 3 and block.depth == 2 and block.residual

    def test_searched_blocks_are_valid_genomes(self):
        a = preset("enas_block_a")
        b = preset("enas_block_b")
        assert isinstance(a, Genome) and isinstance(b, Genome)
        assert validate(a) == [] and validate(b) == []
        assert a != b

    def test_unknown_preset(self):
        with pytest.raises(KeyError, match="nonexistent"):
            preset("nonexistent")


class TestRandomGenome:
    def test_always_valid(self, rng):
        for _ in range(300):
            assert validate(random_genome(rng)) == []

    def test_roughly_uniform_ops(self, rng):
        counts = np.zeros(5)
        n = 4000
        for _ in range(n):
            g = random_genome(rng)
            for cell in g.cells:
                for gene in cell:
                    counts[int(gene.op)] += 1
        freqs = counts / (n * 4)
        assert np.all(np.abs(freqs - 0.2) < 0.02)
