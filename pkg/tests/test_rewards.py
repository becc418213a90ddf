import numpy as np
import pytest
from hypothesis import given, strategies as st

from otblab.rewards import RewardModel, Trajectory, realized_energy_profile, reward_to_go, score_rewards


def _traj(tokens, rewards=None, dists=None):
    T = len(tokens)
    dists = np.full((T, 3), 1 / 3) if dists is None else dists
    return Trajectory(0, tokens, np.zeros(T) if rewards is None else rewards, step_dists=dists)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_reward_to_go_is_suffix_sum(r):
    G = reward_to_go(r)
    for t in range(len(r)):
        assert G[t] == pytest.approx(sum(r[t:]), abs=1e-9)


def test_reward_to_go_rejects_empty():
    with pytest.raises(ValueError):
        reward_to_go([])


def test_terminal_target_pays_on_last_step():
    rm = RewardModel.terminal_target(2, 1.5)
    np.testing.assert_array_equal(score_rewards(rm, [1, 2, 1, 0]), [0, 0, 0, 1.5])
    np.testing.assert_array_equal(score_rewards(rm, [1, 1, 0]), [0, 0, 0])


def test_terminal_pattern_needs_contiguous_run():
    rm = RewardModel.terminal_pattern((1, 2))
    assert score_rewards(rm, [2, 1, 2]).sum() == 1.0
    assert score_rewards(rm, [1, 1, 0]).sum() == 0.0
    assert score_rewards(rm, [1, 0]).sum() == 0.0


def test_dense_rewards_and_table_coverage():
    rm = RewardModel.dense((0.0, 1.0, -1.0))
    np.testing.assert_array_equal(score_rewards(rm, [1, 2, 0]), [1, -1, 0])
    with pytest.raises(ValueError):
        score_rewards(RewardModel.dense((0.0, 1.0)), [2])


def test_reward_model_validation():
    with pytest.raises(ValueError):
        RewardModel("sparse")
    with pytest.raises(ValueError):
        RewardModel.terminal_target(1, 11.0)
    with pytest.raises(ValueError):
        RewardModel.terminal_pattern(())
    with pytest.raises(ValueError):
        RewardModel.dense(())
    assert score_rewards(RewardModel.zero(), [1, 2]).sum() == 0.0


def test_trajectory_eos_only_last():
    _traj((1, 0))
    with pytest.raises(ValueError, match="EOS"):
        _traj((0, 1))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        _traj(())
    with pytest.raises(ValueError):
        Trajectory(0, (1, 2), [0.0], step_dists=np.full((2, 3), 1 / 3))
    with pytest.raises(ValueError):
        _traj((1,), dists=np.array([[0.5, 0.5, 0.1]]))
    with pytest.raises(ValueError):
        Trajectory(0, (1,), [0.0])
    with pytest.raises(ValueError):
        _traj((1,)).with_behavior([0.0, 0.0])


def test_proxy_weights_and_energy_profile():
    d = np.array([[0.6, 0.2, 0.2], [0.1, 0.1, 0.8]])
    tr = _traj((1, 2), dists=d)
    # 1 - 2*0.2 + 0.44 = 1.04 ; 1 - 1.6 + 0.66 = 0.06
    np.testing.assert_allclose(tr.proxy_weights, [1.04, 0.06], atol=1e-15)
    np.testing.assert_allclose(realized_energy_profile(tr), [1.04, 1.10], atol=1e-15)


def test_summary_form_matches_full_distributions():
    d = np.array([[0.6, 0.2, 0.2], [0.1, 0.1, 0.8]])
    full = _traj((1, 2), [0.0, 1.0], d)
    lean = Trajectory(0, (1, 2), [0.0, 1.0], sampled_probs=full.sampled_probs,
                      dist_sq_norms=full.dist_sq_norms)
    np.testing.assert_array_equal(full.proxy_weights, lean.proxy_weights)
    np.testing.assert_array_equal(lean.with_rewards([1.0, 1.0]).proxy_weights, lean.proxy_weights)
    assert lean.with_rewards([1.0, 1.0]).total_reward == 2.0


def test_trajectory_arrays_are_read_only():
    tr = _traj((1, 0), [0.0, 1.0])
    with pytest.raises(ValueError):
        tr.rewards[0] = 5.0
