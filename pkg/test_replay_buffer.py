#!/usr/bin/env python3
"""
Tests for the prioritized replay buffer
Sampling law, importance weights, priority updates and demo retention
"""

import threading

import numpy as np
import pytest
from scipy.stats import chisquare

from replay_buffer import PRIORITY_EPSILON, PrioritizedReplayBuffer, ReplayItem, SumTree


def make_item(step_index: int, is_demo: bool = False) -> ReplayItem:
    return ReplayItem(
        obs=np.full(13, float(step_index)),
        action=step_index % 13,
        reward=0.0,
        next_obs=np.zeros(13),
        terminal=False,
        condition=0,
        episode_id=0,
        step_index=step_index,
        hidden=np.zeros(32),
        is_demo=is_demo
    )


def draw_counts(buffer: PrioritizedReplayBuffer, n_draws: int, batch_size: int, alpha: float) -> np.ndarray:
    counts = np.zeros(buffer.capacity, dtype=int)
    for _ in range(n_draws // batch_size):
        batch = buffer.sample(batch_size, alpha=alpha, beta=0.4)
        np.add.at(counts, batch.indices, 1)
    return counts


class TestSampling:

    def test_three_to_one_ratio(self):
        buffer = PrioritizedReplayBuffer(capacity=2, seed=0)
        buffer.append(make_item(0), priority=3.0)
        buffer.append(make_item(1), priority=1.0)
        counts = draw_counts(buffer, 100_000, 2, alpha=1.0)
        assert counts[0] / counts[1] == pytest.approx(3.0, rel=0.02)

    def test_equal_priorities_sample_uniformly(self):
        buffer = PrioritizedReplayBuffer(capacity=10, seed=1)
        buffer.extend([make_item(i) for i in range(10)])
        counts = draw_counts(buffer, 100_000, 10, alpha=0.6)
        assert chisquare(counts).pvalue > 0.01

    def test_beta_zero_gives_unit_weights(self):
        buffer = PrioritizedReplayBuffer(capacity=5, seed=2)
        for i, p in enumerate([0.5, 1.0, 2.0, 4.0, 8.0]):
            buffer.append(make_item(i), priority=p)
        batch = buffer.sample(4, alpha=0.6, beta=0.0)
        assert np.all(batch.weights == 1.0)

    def test_weights_are_normalized_by_batch_max(self):
        buffer = PrioritizedReplayBuffer(capacity=4, seed=3)
        for i, p in enumerate([1.0, 2.0, 3.0, 4.0]):
            buffer.append(make_item(i), priority=p)
        batch = buffer.sample(4, alpha=1.0, beta=0.5)
        expected = (4 * batch.probabilities) ** -0.5
        assert np.allclose(batch.weights, expected / expected.max())
        assert batch.weights.max() == 1.0

    def test_empty_buffer_raises(self):
        with pytest.raises(ValueError):
            PrioritizedReplayBuffer(capacity=3).sample(1)

    def test_batch_larger_than_buffer_raises(self):
        buffer = PrioritizedReplayBuffer(capacity=3)
        buffer.append(make_item(0))
        with pytest.raises(ValueError):
            buffer.sample(2)

    def test_same_seed_same_draws(self):
        draws = []
        for _ in range(2):
            buffer = PrioritizedReplayBuffer(capacity=8, seed=4)
            buffer.extend([make_item(i) for i in range(8)])
            draws.append(buffer.sample(5).indices)
        assert np.array_equal(draws[0], draws[1])

    def test_to_transitions(self):
        buffer = PrioritizedReplayBuffer(capacity=4, seed=5)
        buffer.extend([make_item(i) for i in range(4)])
        transitions = buffer.sample(3).to_transitions()
        assert len(transitions) == 3
        assert transitions.obs.shape == (3, 13)
        assert transitions.weights.shape == (3,)


    def test_partly_filled_buffer_never_draws_empty_slots(self):
        buffer = PrioritizedReplayBuffer(capacity=100_000, seed=6)
        buffer.extend([make_item(i) for i in range(3)])
        counts = draw_counts(buffer, 3_000, 3, alpha=0.6)
        assert counts[:3].sum() == 3_000
        assert chisquare(counts[:3]).pvalue > 0.01

    def test_updates_after_sampling_change_the_law(self):
        buffer = PrioritizedReplayBuffer(capacity=2, seed=7)
        buffer.extend([make_item(0), make_item(1)])
        buffer.sample(2, alpha=1.0)
        buffer.update_priorities([0, 1], [3.0 - PRIORITY_EPSILON, 1.0 - PRIORITY_EPSILON])
        counts = draw_counts(buffer, 100_000, 2, alpha=1.0)
        assert counts[0] / counts[1] == pytest.approx(3.0, rel=0.02)

    def test_evicted_slot_leaves_the_tree(self):
        buffer = PrioritizedReplayBuffer(capacity=2, seed=8)
        buffer.append(make_item(0), priority=100.0)
        buffer.append(make_item(1), priority=1.0)
        buffer.sample(1, alpha=1.0)
        buffer.append(make_item(2), priority=1.0)
        batch = buffer.sample(2, alpha=1.0)
        assert batch.probabilities.tolist() == [0.5, 0.5]


class TestSumTree:

    def test_parents_hold_child_sums(self):
        tree = SumTree(5)
        for i, value in enumerate([1.0, 2.0, 3.0, 4.0, 5.0]):
            tree.update(i, value)
        assert tree.size == 8
        assert tree.total == 15.0
        rebuilt = SumTree(5)
        rebuilt.rebuild(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
        assert np.array_equal(tree.tree, rebuilt.tree)

    def test_find_follows_prefix_sums(self):
        tree = SumTree(4)
        tree.rebuild(np.array([1.0, 0.0, 2.0, 1.0]))
        found = tree.find(np.array([0.0, 0.99, 1.0, 2.5, 3.0, 3.99]))
        assert found.tolist() == [0, 0, 2, 2, 3, 3]

    def test_single_slot(self):
        tree = SumTree(1)
        tree.update(0, 2.0)
        assert tree.find(np.array([1.5])).tolist() == [0]

class TestPriorities:

    def test_new_items_get_max_priority(self):
        buffer = PrioritizedReplayBuffer(capacity=4)
        buffer.append(make_item(0), priority=5.0)
        slot = buffer.append(make_item(1))
        assert buffer.priority(slot) == 5.0

    def test_update_adds_epsilon(self):
        buffer = PrioritizedReplayBuffer(capacity=4)
        slot = buffer.append(make_item(0))
        buffer.update_priorities([slot], [-0.25])
        assert buffer.priority(slot) == pytest.approx(0.25 + PRIORITY_EPSILON)

    def test_zero_td_error_keeps_priority_positive(self):
        buffer = PrioritizedReplayBuffer(capacity=4)
        slot = buffer.append(make_item(0))
        buffer.update_priorities([slot], [0.0])
        assert buffer.priority(slot) > 0

    def test_non_positive_priority_rejected(self):
        with pytest.raises(ValueError):
            PrioritizedReplayBuffer(capacity=2).append(make_item(0), priority=0.0)


class TestCapacity:

    def test_capacity_is_respected(self):
        buffer = PrioritizedReplayBuffer(capacity=5)
        buffer.extend([make_item(i) for i in range(12)])
        assert len(buffer) == 5
        assert sorted(it.step_index for it in buffer.items()) == [7, 8, 9, 10, 11]

    def test_demo_items_outlive_agent_items(self):
        buffer = PrioritizedReplayBuffer(capacity=4)
        buffer.extend([make_item(i, is_demo=True) for i in range(2)])
        buffer.extend([make_item(10 + i) for i in range(6)])
        kept = buffer.items()
        assert buffer.n_demo == 2
        assert sum(it.is_demo for it in kept) == 2
        assert sorted(it.step_index for it in kept if not it.is_demo) == [14, 15]

    def test_demo_items_evicted_only_when_nothing_else_remains(self):
        buffer = PrioritizedReplayBuffer(capacity=2)
        buffer.extend([make_item(0, is_demo=True), make_item(1, is_demo=True)])
        buffer.append(make_item(2, is_demo=True))
        assert sorted(it.step_index for it in buffer.items()) == [1, 2]

    def test_concurrent_appends(self):
        buffer = PrioritizedReplayBuffer(capacity=1000)

        def worker(offset):
            for i in range(200):
                buffer.append(make_item(offset + i))

        threads = [threading.Thread(target=worker, args=(k * 1000,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(buffer) == 800
        assert buffer.get_info()["agent_items"] == 800
