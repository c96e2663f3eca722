#!/usr/bin/env python3
"""
Tests des markups, du registre et des têtes chaînées
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from autodiff.tensor import Tensor
from network.attention import LandmarkSet
from network.heads import (
    CoarseningMap, HeadStack, Markup, MarkupError, MarkupRegistry, chained_heads,
    check_markup_order, derive_coarse_markup,
)

REGISTRY_TEXT = """
markup fine4 4
a
b
c
d
interocular 0 1
pupils 0 2 / 1 3
flip 1 0 3 2

markup coarse2 2
left
right
interocular 0 1

coarsen fine4 coarse2
0 2
1 3
"""


def labels(count):
    return tuple(f"p{i}" for i in range(count))


def test_markup_validation():
    with pytest.raises(MarkupError):
        Markup('bad name', labels(2))
    with pytest.raises(MarkupError):
        Markup('empty', ())
    with pytest.raises(MarkupError):
        Markup('m', labels(3), interocular=(0, 3))
    with pytest.raises(MarkupError):
        Markup('m', labels(3), flip=(0, 0, 1))
    assert Markup('m', labels(3), flip=(2, 1, 0)).num_landmarks == 3


def test_markup_order_must_strictly_decrease():
    check_markup_order([Markup('a', labels(5)), Markup('b', labels(3))])
    with pytest.raises(MarkupError):
        check_markup_order([Markup('a', labels(3)), Markup('b', labels(3))])
    with pytest.raises(MarkupError):
        check_markup_order([])


def test_registry_parse_and_canonical_dump():
    registry = MarkupRegistry.parse(REGISTRY_TEXT)
    fine = registry.get('fine4')
    assert fine.labels == ('a', 'b', 'c', 'd')
    assert fine.pupils == ((0, 2), (1, 3))
    assert fine.flip == (1, 0, 3, 2)
    assert registry.coarsening('fine4', 'coarse2').groups == ((0, 2), (1, 3))
    dumped = registry.dump()
    assert MarkupRegistry.parse(dumped).dump() == dumped


def test_registry_file_round_trip(tmp_path):
    registry = MarkupRegistry.parse(REGISTRY_TEXT)
    path = str(tmp_path / 'markups.txt')
    registry.save(path)
    assert MarkupRegistry.load(path).dump() == registry.dump()


@pytest.mark.parametrize("text, line", [
    ("markup m 3\na\nb\n", 1),
    ("markup m 2\na\nb\ninterocular 0\n", 4),
    ("markup m 2\na\nb\ncoarsen m m\n0\n", 4),
    ("shape m 2\n", 1),
])
def test_registry_errors_name_the_line(text, line):
    with pytest.raises(MarkupError, match=f"ligne {line}"):
        MarkupRegistry.parse(text)


def test_registry_rejects_unknown_and_out_of_range():
    registry = MarkupRegistry.parse(REGISTRY_TEXT)
    with pytest.raises(MarkupError):
        registry.get('lm194')
    with pytest.raises(MarkupError):
        registry.coarsening('coarse2', 'fine4')
    with pytest.raises(MarkupError):
        registry.add_coarsening(CoarseningMap('fine4', 'coarse2', ((0,), (4,))))
    with pytest.raises(MarkupError):
        registry.add_markup(Markup('fine4', labels(4)))


def test_derive_coarse_markup_averages_groups():
    fine = LandmarkSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), 'fine4')
    coarse = derive_coarse_markup(fine, CoarseningMap('fine4', 'coarse2', ((0, 2), (1, 3))))
    assert coarse.markup == 'coarse2'
    assert np.allclose(coarse.values, [[0.0, 0.5], [1.0, 0.5]])
    with pytest.raises(MarkupError):
        derive_coarse_markup(LandmarkSet(fine.values, 'other'),
                             CoarseningMap('fine4', 'coarse2', ((0,), (1,))))


def test_chained_heads_read_previous_logits():
    markups = [Markup('a', labels(6)), Markup('b', labels(4)), Markup('c', labels(2))]
    heads = HeadStack(3, markups, mode='chained', fusion_index=1,
                      rng=np.random.default_rng(0))
    assert [t.in_channels for t in heads.transfers] == [3, 6, 4]
    out = chained_heads(Tensor(np.random.default_rng(1).normal(size=(2, 3, 5, 5))), heads, 2)
    assert len(out) == 3
    assert out.fusion_maps.markup == 'b'
    assert out.by_name('c').landmarks.values.shape == (2, 2, 2)
    assert out.by_name('a').maps.stage == 2
    with pytest.raises(MarkupError):
        out.by_name('d')


def test_independent_heads_read_the_embedding():
    markups = [Markup('a', labels(6)), Markup('b', labels(4))]
    heads = HeadStack(3, markups, mode='independent')
    assert [t.in_channels for t in heads.transfers] == [3, 3]
    with pytest.raises(ValueError):
        HeadStack(3, markups, mode='parallel')
    with pytest.raises(ValueError):
        HeadStack(3, markups, fusion_index=2)


@pytest.mark.parametrize("mode", ['chained', 'independent'])
def test_head_parameter_count(mode):
    counts = (98, 68, 5)
    embed = 16
    markups = [Markup(f"m{count}", labels(count)) for count in counts]
    heads = HeadStack(embed, markups, mode=mode)
    if mode == 'chained':
        inputs = (embed,) + counts[:-1]
    else:
        inputs = (embed,) * len(counts)
    expected = sum(c_in * count + count for c_in, count in zip(inputs, counts))
    assert heads.num_parameters() == expected
