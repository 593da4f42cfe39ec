"""OIM loss: softmax against the lookup table + circular queue buffers."""

import numpy as np
import pytest

from promptsearch import tensor as T
from promptsearch.oim import UNLABELED, OimState, oim_loss, oim_update
from promptsearch.tensor import Tensor

from conftest import numerical_grad, rel_error


def unit_state(num_ids=3, dim=4):
    """State with lut rows replaced by standard basis vectors."""
    state = OimState(num_ids, dim, seed=0)
    state.lut = np.eye(num_ids, dim)
    return state


def test_loss_matches_hand_softmax():
    state = unit_state()
    f = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    loss = oim_loss([f], [0], state)
    logits = np.array([1.0, 0.0, 0.0]) / state.temperature
    expected = -(logits[0] - np.log(np.exp(logits).sum()))
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    # tau=0.1 makes the margin huge: loss ~ 2 exp(-10)
    assert loss.item() == pytest.approx(2 * np.exp(-10), rel=1e-3)


def test_loss_two_way_tie():
    state = unit_state(num_ids=2, dim=2)
    state.temperature = 1.0
    f = Tensor(np.array([1.0, 1.0]))
    # normalized feature has equal dot with both rows -> p = 1/2
    loss = oim_loss([f], [0], state)
    assert loss.item() == pytest.approx(np.log(2.0), rel=1e-12)


def test_loss_empty_and_unlabeled_only():
    state = unit_state()
    assert oim_loss([], [], state).item() == 0.0
    f = Tensor(np.ones(4))
    assert oim_loss([f], [UNLABELED], state).item() == 0.0


def test_loss_label_out_of_range():
    state = unit_state()
    with pytest.raises(IndexError):
        oim_loss([Tensor(np.ones(4))], [3], state)


def test_loss_gradient_features_only(rng):
    state = OimState(4, 5, seed=1)
    state.cq.append(rng.normal(size=5) / 3.0)
    arr = rng.normal(size=5)

    def value():
        return oim_loss([Tensor(arr)], [2], state).item()

    t = Tensor(arr.copy(), requires_grad=True)
    lut_before = state.lut.copy()
    oim_loss([t], [2], state).backward()
    num = numerical_grad(value, arr)
    assert rel_error(t.grad, num) < 1e-4
    np.testing.assert_array_equal(state.lut, lut_before)


def test_update_momentum_example():
    state = unit_state(num_ids=2, dim=2)
    oim_update([Tensor(np.array([0.0, 1.0]))], [0], state)
    np.testing.assert_allclose(state.lut[0], np.array([1.0, 1.0]) / np.sqrt(2))
    assert np.linalg.norm(state.lut[0]) == pytest.approx(1.0)


def test_update_queue_is_circular():
    state = OimState(2, 3, seed=0, queue_size=2)
    vs = [np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])]
    for v in vs:
        oim_update([Tensor(v)], [UNLABELED], state)
    assert len(state.cq) == 2
    np.testing.assert_array_equal(np.stack(list(state.cq)), np.stack(vs[1:]))
    assert state.bank().shape == (4, 3)


def test_update_skips_zero_features():
    state = unit_state(num_ids=2, dim=2)
    before = state.lut.copy()
    oim_update([Tensor(np.zeros(2))], [0], state)
    np.testing.assert_array_equal(state.lut, before)


def test_bank_rows_stay_unit_norm(rng):
    state = OimState(5, 6, seed=2)
    for _ in range(20):
        labels = [int(rng.integers(0, 5)), UNLABELED]
        feats = [Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))]
        oim_update(feats, labels, state)
    norms = np.linalg.norm(state.bank(), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
