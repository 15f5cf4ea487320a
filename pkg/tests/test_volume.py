import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from morphoskel.volume import (CALCIUM, LUMEN, WALL, ConditioningMaps, LatentGrid, MorphFeatureMatrix,
                               SegmentationMap, SoftLabelMap, VolumeFormatError, argmax_labels, one_hot,
                               read_array, read_features, read_volume, write_array, write_features,
                               write_volume)

label_grids = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
                     elements=st.integers(0, 3))


@given(labels=label_grids)
def test_roundtrip_is_identity(tmp_path_factory, labels):
    path = tmp_path_factory.mktemp("v") / "a.msv"
    seg = SegmentationMap(labels, (0.06, 0.06, 0.2))
    write_volume(seg, path)
    assert read_volume(path) == seg


@given(label_grids)
def test_one_hot_argmax_roundtrip(labels):
    seg = SegmentationMap(labels)
    soft = one_hot(seg)
    assert np.allclose(soft.probs.sum(axis=0), 1)
    assert argmax_labels(soft) == seg


def test_header_layout(tmp_path):
    seg = SegmentationMap(np.arange(24).reshape(2, 3, 4) % 4)
    write_volume(seg, tmp_path / "a.msv")
    raw = (tmp_path / "a.msv").read_bytes()
    header, payload = raw.split(b"\n", 1)
    h = json.loads(header)
    assert h["magic"] == "MSV1" and h["shape"] == [2, 3, 4]
    assert h["labels"] == {"0": "background", "1": "wall", "2": "lumen", "3": "calcium"}
    # row-major, depth fastest
    assert payload == bytes(seg.labels.ravel(order="C"))


@pytest.mark.parametrize("mutate", [
    lambda raw: raw[:-1],
    lambda raw: raw + b"\x00",
    lambda raw: raw.replace(b"MSV1", b"MSV2"),
    lambda raw: b"{not json\n" + raw.split(b"\n", 1)[1],
    lambda raw: raw[:-1] + b"\x07",
])
def test_malformed_files_are_rejected(tmp_path, mutate):
    seg = SegmentationMap(np.zeros((2, 2, 2), dtype=np.uint8))
    write_volume(seg, tmp_path / "a.msv")
    (tmp_path / "b.msv").write_bytes(mutate((tmp_path / "a.msv").read_bytes()))
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "b.msv")


def test_invalid_labels_rejected():
    with pytest.raises(ValueError):
        SegmentationMap(np.full((2, 2, 2), 4))
    with pytest.raises(ValueError):
        SegmentationMap(np.zeros((2, 2)))


def test_argmax_ties_go_to_lowest_class():
    probs = np.zeros((4, 1, 1, 3))
    probs[[WALL, LUMEN], 0, 0, 0] = 0.5
    probs[[LUMEN, CALCIUM], 0, 0, 1] = 0.5
    probs[:, 0, 0, 2] = 0.25
    assert argmax_labels(SoftLabelMap(probs)).labels.ravel().tolist() == [WALL, LUMEN, 0]


def test_soft_map_normalization():
    p = np.zeros((4, 2, 1, 1))
    p[:, 0] = [[[1.0]], [[3.0]], [[0.0]], [[-1.0]]]
    n = SoftLabelMap(p).normalized().probs
    assert np.allclose(n[:, 0, 0, 0], [0.25, 0.75, 0, 0])
    assert np.allclose(n[:, 1, 0, 0], 0.25)


def test_arrays_and_features_roundtrip(tmp_path, rng):
    a = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    write_array(a, tmp_path / "a.msv")
    assert np.array_equal(read_array(tmp_path / "a.msv"), a)
    m = MorphFeatureMatrix(rng.random((2, 7)), ("lumen_area", "calcium_area"))
    write_features(m, tmp_path / "f.csv")
    back = read_features(tmp_path / "f.csv")
    assert back.names == m.names and np.array_equal(back.features, m.features)


def test_objects_are_read_only():
    seg = SegmentationMap(np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        seg.labels[0, 0, 0] = 1


def test_conditioning_maps_checks():
    with pytest.raises(ValueError):
        ConditioningMaps(skel=np.full((1, 2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        ConditioningMaps(morph=np.zeros((2, 2, 2, 2)), skel=np.zeros((1, 3, 2, 2)))
    assert not ConditioningMaps(skel=np.zeros((1, 2, 2, 2))).has_skel
    c = ConditioningMaps(morph=np.zeros((2, 4, 4, 4)))
    c.check_latent((4, 4, 4))
    with pytest.raises(ValueError):
        c.check_latent((4, 4, 8))


def test_latent_grid_factor():
    z = LatentGrid(np.zeros((4, 16, 16, 32)), factor=4)
    z.check_source((64, 64, 128))
    with pytest.raises(ValueError):
        z.check_source((64, 64, 64))
