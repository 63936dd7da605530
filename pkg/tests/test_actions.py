import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assemblypolicy import rotations
from assemblypolicy.actions import (CLOSE, OPEN, ActionCommand, bin_centers, dediscretize_action,
                                    discretize_action, quantize, tokens_from_values)
from assemblypolicy.ccmt import CHUNK_IDS, ActionTokenSequence

unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_identity_bins():
    seq = discretize_action(ActionCommand(np.zeros(3), [1, 0, 0, 0], OPEN), 32)
    np.testing.assert_array_equal(seq.discrete, [31, 16, 16, 16, 0])
    np.testing.assert_array_equal(seq.chunk_ids, CHUNK_IDS)
    assert len(seq) == 5


def test_identity_round_trip_angle():
    """Binning (1, 0, 0, 0) lands on centers (31/32, 1/32, 1/32, 1/32)+offsets; the
    reconstruction sits about 3.2 degrees of arc from the identity."""
    seq = discretize_action(ActionCommand(np.zeros(3), [1, 0, 0, 0], OPEN), 32)
    back = dediscretize_action(seq, np.zeros(3), 32)
    centers = bin_centers([31, 16, 16, 16], 32)
    expected = np.degrees(np.arccos(centers[0] / np.linalg.norm(centers)))
    got = np.degrees(rotations.arc_distance(back.r, [1, 0, 0, 0]))
    assert got == pytest.approx(expected, abs=1e-9)
    assert 3.1 < got < 3.3


def test_gripper_tokens():
    seq = discretize_action(ActionCommand(np.zeros(3), [1, 0, 0, 0], CLOSE))
    assert seq.discrete[-1] == 1
    back = dediscretize_action(tokens_from_values([31, 16, 16, 16, 0]), np.zeros(3))
    assert back.g == OPEN


def test_quantize_edges_clamped():
    np.testing.assert_array_equal(quantize([-1.0, -0.99, 0.0, 0.999, 1.0], 32), [0, 0, 16, 31, 31])


@settings(max_examples=200, deadline=None)
@given(unit_quats)
def test_component_error_half_bin(q):
    q = rotations.canonical(q)
    back = bin_centers(quantize(q, 32), 32)
    assert np.all(np.abs(back - q) <= 1 / 32 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(unit_quats, st.sampled_from([OPEN, CLOSE]))
def test_dediscretize_unit_and_canonical(q, g):
    a = ActionCommand(np.zeros(3), q, g)
    back = dediscretize_action(discretize_action(a, 32), [0.1, 0.2, 0.3], 32)
    assert abs(np.linalg.norm(back.r) - 1) < 1e-6
    assert back.r[0] >= 0
    assert back.g == g
    assert np.degrees(rotations.arc_distance(back.r, a.r)) <= 4.0


def test_chunk_ids_must_be_nondecreasing():
    with pytest.raises(ValueError):
        ActionTokenSequence([1, 2], [0, 0], [2, 1])


def test_action_command_validation():
    a = ActionCommand([0, 0, 0], [-1, 0, 0, 0], CLOSE)
    np.testing.assert_array_equal(a.r, [1, 0, 0, 0])
    with pytest.raises(ValueError):
        ActionCommand([0, 0, 0], [1, 0, 0, 0], 2)
    b = ActionCommand.from_dict(a.to_dict())
    np.testing.assert_array_equal(b.p, a.p)
    np.testing.assert_array_equal(b.r, a.r)
    assert b.g == a.g


def test_rotation_helpers():
    rng = np.random.default_rng(0)
    q = rotations.random_unit(rng, 50)
    assert np.all(q[:, 0] >= 0)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1)
    for qi in q[:10]:
        np.testing.assert_allclose(rotations.from_matrix(rotations.to_matrix(qi)), qi, atol=1e-9)
    r = rotations.from_axis_angle([0, 0, 1], np.pi / 3)
    assert np.degrees(rotations.rotation_angle(r, [1, 0, 0, 0])) == pytest.approx(60)
    np.testing.assert_allclose(rotations.rotate(r, [1, 0, 0]), [0.5, np.sqrt(3) / 2, 0], atol=1e-12)
    ab = rotations.multiply(q[0], rotations.conjugate(q[0]))
    np.testing.assert_allclose(ab, [1, 0, 0, 0], atol=1e-12)
