import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from detgen.errors import ConfigError
from detgen.rewardcore import RewardVector, fuse_advantages, group_advantages, score_batch, score_sample
from detgen.synthworld import Sample, user_prompt

groups = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(0, 1))


def test_symmetric_triple():
    r = np.column_stack([[0.1, 0.2, 0.3], [0.5] * 3, [0.7] * 3])
    adv = fuse_advantages(r).advantages
    np.testing.assert_allclose(adv, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-4)


def test_degenerate_group_is_all_zero():
    adv = fuse_advantages(np.full((8, 3), 0.42)).advantages
    assert np.array_equal(adv, np.zeros(8))


@given(groups)
def test_advantages_sum_to_zero(r):
    assert abs(fuse_advantages(r).advantages.sum()) <= 1e-9


@given(groups, st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 2))
def test_per_dimension_affine_invariance(r, scale, shift, dim):
    moved = r.copy()
    moved[:, dim] = scale * moved[:, dim] + shift
    a, b = fuse_advantages(r).advantages, fuse_advantages(moved).advantages
    # the 1e-8 guard perturbs z by about z * 1e-8 / std, largest for the narrower column
    spread = r[:, dim].std() * min(scale, 1.0)
    if spread > 1e-6:
        np.testing.assert_allclose(a, b, atol=1e-7 * np.sqrt(len(r)) / spread)


def test_weights_and_reward_vectors():
    vecs = [RewardVector(0.1, 0.9, 0.5), RewardVector(0.3, 0.1, 0.5)]
    full = fuse_advantages(vecs).advantages
    only_sem = fuse_advantages(vecs, (1, 0, 0)).advantages
    np.testing.assert_allclose(only_sem, [-1, 1], atol=1e-6)
    np.testing.assert_allclose(full, [0, 0], atol=1e-6)


def test_group_scope():
    r = np.vstack([np.column_stack([[0.0, 1.0]] * 3), np.column_stack([[5.0, 7.0]] * 3)])
    g = group_advantages(r, 2)
    np.testing.assert_allclose(g, [-3, 3, -3, 3], atol=1e-6)
    b = group_advantages(r, 2, scope="batch")
    assert b[0] < b[1] < b[2] < b[3]
    with pytest.raises(ConfigError):
        group_advantages(r, 3)
    with pytest.raises(ConfigError):
        group_advantages(r, 2, scope="world")
    with pytest.raises(ConfigError):
        fuse_advantages(np.zeros((1, 3)))


def test_score_batch_matches_detectors(tiny_stack):
    w, _, suite, _ = tiny_stack
    x = np.array([[4.0, 0.0], [0.0, 4.0]])
    r = score_batch(x, [0, 2], suite)
    assert r.shape == (2, 3)
    np.testing.assert_array_equal(r[:, 1], suite.feature.reward(x))
    rv = score_sample(Sample(x[1], user_prompt(w, 2), "generated"), 2, suite)
    assert rv.r_align == r[1, 2]
