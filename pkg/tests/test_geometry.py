import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facecode.geometry import (REGIONS, GeometryError, MeshSequence, TemplateMesh, VertexMask,
                               build_masks, vertex_motion_stddev)


def test_all_mouth_labels():
    upper, mouth, eyelid, lip = build_masks(["mouth"] * 5, 1.0, 0.1)
    assert np.all(mouth.weights == 1.0)
    assert np.all(upper.weights == 0.1)
    assert np.all(eyelid.weights == 0) and np.all(lip.weights == 0)


def test_eyelid_mask_is_exactly_binary():
    labels = ["eyelid", "upper_face", "lip", "eyelid", "other"]
    _, _, eyelid, lip = build_masks(labels)
    assert eyelid.weights.tolist() == [1.0, 0.0, 0.0, 1.0, 0.0]
    assert lip.weights.tolist() == [0.0, 0.0, 1.0, 0.0, 0.0]


def test_other_is_weak_in_both_masks():
    upper, mouth, _, _ = build_masks(["other", "upper_face", "mouth"], 1.0, 0.1)
    assert upper.weights[0] == 0.1 and mouth.weights[0] == 0.1
    assert upper.weights[1] == 1.0 and mouth.weights[2] == 1.0


def test_mask_errors():
    with pytest.raises(GeometryError, match="unknown region"):
        build_masks(["mouth", "nose"])
    with pytest.raises(GeometryError):
        build_masks(["mouth"], w_high=0.1, w_low=0.1)
    with pytest.raises(GeometryError):
        VertexMask([0.0, 0.5], "eyelid")
    with pytest.raises(GeometryError):
        VertexMask([-1.0], "upper")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(REGIONS), min_size=1, max_size=30), st.randoms())
def test_masks_permutation_equivariant(labels, rnd):
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    base = build_masks(labels)
    permuted = build_masks([labels[i] for i in perm])
    for a, b in zip(base, permuted):
        np.testing.assert_array_equal(a.weights[perm], b.weights)


def test_template_and_sequence_validation():
    with pytest.raises(GeometryError):
        TemplateMesh(np.zeros((3, 3)), ["mouth", "lip"], "x")
    with pytest.raises(GeometryError):
        TemplateMesh(np.zeros((0, 3)), [], "x")
    with pytest.raises(GeometryError):
        MeshSequence(np.full((2, 3, 3), np.nan))
    with pytest.raises(GeometryError):
        MeshSequence(np.zeros((0, 3, 3)))
    seq = MeshSequence(np.zeros((2, 3, 3)))
    with pytest.raises(GeometryError):
        seq.check_template(TemplateMesh(np.zeros((4, 3)), ["lip"] * 4, "x"))


def test_motion_stddev_static_is_zero():
    frames = np.tile(np.arange(12.0).reshape(1, 4, 3), (10, 1, 1))
    assert np.all(vertex_motion_stddev([MeshSequence(frames)]) == 0)


def test_motion_stddev_locality():
    frames = np.zeros((50, 5, 3))
    frames[:, 2, 0] = np.sin(np.linspace(0, 6, 50))
    out = vertex_motion_stddev([frames])
    assert np.count_nonzero(out) == 1 and out[2] > 0


def test_motion_stddev_sine_oracle():
    t = np.arange(1000) / 1000
    frames = np.zeros((1000, 1, 3))
    frames[:, 0, 0] = np.sin(2 * np.pi * 5 * t)  # whole periods, 1 mm amplitude
    out = vertex_motion_stddev([frames])
    assert out[0] == pytest.approx(np.std(frames[:, 0, 0]), rel=1e-12)
    assert out[0] == pytest.approx(1 / np.sqrt(2), abs=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_motion_stddev_translation_invariant_and_nonnegative(seed, offset):
    frames = np.random.default_rng(seed).normal(size=(7, 4, 3))
    a = vertex_motion_stddev([frames])
    b = vertex_motion_stddev([frames + offset])
    assert np.all(a >= 0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_motion_stddev_pools_sequences_and_checks_input(rng):
    a, b = rng.normal(size=(4, 3, 3)), rng.normal(size=(6, 3, 3))
    np.testing.assert_allclose(vertex_motion_stddev([a, b]),
                               vertex_motion_stddev([np.concatenate([a, b])]))
    np.testing.assert_allclose(vertex_motion_stddev([a]), vertex_motion_stddev([a[::-1]]))
    with pytest.raises(GeometryError):
        vertex_motion_stddev([])
    with pytest.raises(GeometryError):
        vertex_motion_stddev([a, rng.normal(size=(4, 2, 3))])
