#!/usr/bin/env python3
"""
Tests du format d'annotations et du chargement des jeux de données
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from dataset.annotations import (
    AnnotationError, AnnotationFile, AnnotationRecord, LandmarkDataset, Sample, format_annotation_file,
    load_dataset, parse_annotation_file, read_tags, write_annotation_file, write_tags,
)
from network.heads import MarkupRegistry
from utils.image_io import write_image

REGISTRY = MarkupRegistry.parse("markup tri3 3\na\nb\nc\ninterocular 0 1\n\n"
                                "markup pair2 2\nl\nr\n")


def make_image(directory, name, height=5, width=9):
    image = np.linspace(0.0, 1.0, height * width).reshape(height, width)
    write_image(os.path.join(directory, name), image)


def write_text(path, text):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(text)


def test_empty_file_is_an_empty_dataset(tmp_path):
    path = str(tmp_path / 'empty.txt')
    write_text(path, '')
    assert parse_annotation_file(path).records == []
    assert len(load_dataset(path, None, REGISTRY, 4)) == 0


def test_header_only_file_is_an_empty_dataset(tmp_path):
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "# commentaire\nlandmarks v1 tri3 3\n\n")
    dataset = load_dataset(path, None, REGISTRY, 4)
    assert len(dataset) == 0


def test_single_record_is_normalized(tmp_path):
    make_image(str(tmp_path), 'img.pgm')
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "landmarks v1 tri3 3\nimg.pgm 0 0 8 4 4 2\n")
    dataset = load_dataset(path, None, REGISTRY, 4)
    assert len(dataset) == 1
    sample = dataset[0]
    assert sample.image.shape == (1, 4, 4)
    assert np.allclose(sample.annotations['tri3'], [[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
    assert sample.name == 'img.pgm'
    assert dataset.markups == ('tri3',)


def test_missing_coordinate_pair_names_the_line(tmp_path):
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "landmarks v1 tri3 3\n\nimg.pgm 0 0 8 4\n")
    with pytest.raises(AnnotationError) as info:
        parse_annotation_file(path)
    assert info.value.line == 3


@pytest.mark.parametrize("text", [
    "points v1 tri3 3\n",
    "landmarks v2 tri3 3\n",
    "landmarks v1 tri3 3\nimg.pgm 0 0 8 x 4 2\n",
    "landmarks v1 tri3 3\nimg.pgm 0 0 8 nan 4 2\n",
])
def test_malformed_files(tmp_path, text):
    path = str(tmp_path / 'bad.txt')
    write_text(path, text)
    with pytest.raises(AnnotationError):
        parse_annotation_file(path)


def test_landmark_count_must_match_registry(tmp_path):
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "landmarks v1 tri3 2\nimg.pgm 0 0 1 1\n")
    with pytest.raises(AnnotationError):
        load_dataset(path, None, REGISTRY, 4)


def test_out_of_image_points_are_clamped_and_counted(tmp_path):
    make_image(str(tmp_path), 'img.pgm')
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "landmarks v1 tri3 3\nimg.pgm -2 0 9 4 4 2\n")
    dataset = load_dataset(path, None, REGISTRY, 4)
    assert dataset.clamped_count == 2
    assert np.allclose(dataset[0].annotations['tri3'][:2], [[0.0, 0.0], [1.0, 1.0]])


def test_missing_image_is_an_error(tmp_path):
    path = str(tmp_path / 'tri3.txt')
    write_text(path, "landmarks v1 tri3 3\nabsent.pgm 0 0 1 1 2 2\n")
    with pytest.raises(OSError):
        load_dataset(path, None, REGISTRY, 4)


def test_tags_side_file(tmp_path):
    make_image(str(tmp_path), 'a.pgm')
    make_image(str(tmp_path), 'b.pgm')
    write_tags(str(tmp_path), {'a.pgm': ('large_pose', 'occluded'), 'b.pgm': ()})
    assert read_tags(str(tmp_path))['a.pgm'] == ('large_pose', 'occluded')
    annotation = AnnotationFile('pair2', 2, [AnnotationRecord('a.pgm', np.zeros((2, 2))),
                                             AnnotationRecord('b.pgm', np.ones((2, 2)))])
    path = str(tmp_path / 'pair2.txt')
    write_annotation_file(path, annotation)
    dataset = load_dataset(path, None, REGISTRY, 4)
    assert [s.tags for s in dataset] == [('large_pose', 'occluded'), ()]
    assert len(dataset.filter_tags(['occluded'])) == 1


def test_format_is_read_back(tmp_path):
    points = np.array([[1.25, 2.5], [3.0, 4.125], [0.0, 0.5]])
    text = format_annotation_file(AnnotationFile('tri3', 3, [AnnotationRecord('x.pgm', points)]))
    assert text.splitlines()[0] == 'landmarks v1 tri3 3'
    path = str(tmp_path / 'tri3.txt')
    write_text(path, text)
    parsed = parse_annotation_file(path)
    assert parsed.markup == 'tri3'
    assert np.allclose(parsed.records[0].points, points)


def test_restrict_drops_unannotated_samples():
    image = np.zeros((1, 2, 2))
    dataset = LandmarkDataset([Sample(image, {'tri3': np.zeros((3, 2))}),
                               Sample(image, {'pair2': np.zeros((2, 2)),
                                              'tri3': np.zeros((3, 2))})])
    restricted = dataset.restrict(['pair2'])
    assert len(restricted) == 1
    assert restricted.markups == ('pair2',)
    assert len(dataset.subset([1])) == 1
    with pytest.raises(ValueError):
        Sample(image, {})
