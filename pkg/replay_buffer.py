#!/usr/bin/env python3
"""
Prioritized Replay Buffer for the AnimaRL Simulator
Proportional prioritized experience replay with demonstration retention
"""

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from qfunction import TransitionBatch

PRIORITY_EPSILON = 1e-3


@dataclass(frozen=True)
class ReplayItem:
    """One stored transition; hidden is the recurrent state before obs"""
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool
    condition: int
    episode_id: int
    step_index: int
    hidden: np.ndarray
    expert_action: int = -1
    is_demo: bool = False


@dataclass
class SampledBatch:
    """Sampled items with their slots, sampling probabilities and importance weights"""
    items: List[ReplayItem]
    indices: np.ndarray
    probabilities: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_transitions(self) -> TransitionBatch:
        return TransitionBatch.from_arrays(
            obs=[it.obs for it in self.items],
            actions=[it.action for it in self.items],
            rewards=[it.reward for it in self.items],
            next_obs=[it.next_obs for it in self.items],
            terminals=[float(it.terminal) for it in self.items],
            conditions=[it.condition for it in self.items],
            hidden=[it.hidden for it in self.items],
            weights=self.weights,
            expert_actions=[it.expert_action for it in self.items]
        )


class SumTree:
    """
    Binary tree of non-negative leaf values with prefix-sum search

    Leaves live at size..2*size-1; each parent holds the sum of its children.
    """

    def __init__(self, capacity: int):
        self.size = 1 << max(capacity - 1, 0).bit_length()
        self.depth = self.size.bit_length() - 1
        self.tree = np.zeros(2 * self.size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self, indices: np.ndarray) -> np.ndarray:
        return self.tree[self.size + np.asarray(indices)]

    def update(self, index: int, value: float):
        node = self.size + index
        self.tree[node] = value
        node //= 2
        while node >= 1:
            self.tree[node] = self.tree[2 * node] + self.tree[2 * node + 1]
            node //= 2

    def rebuild(self, values: np.ndarray):
        """Replace every leaf at once and recompute the parents level by level"""
        self.tree[:] = 0.0
        self.tree[self.size:self.size + len(values)] = values
        lo = self.size
        while lo > 1:
            self.tree[lo // 2:lo] = self.tree[lo:2 * lo].reshape(-1, 2).sum(axis=1)
            lo //= 2

    def find(self, targets: np.ndarray) -> np.ndarray:
        """Leaf index whose prefix-sum interval holds each target in [0, total)"""
        targets = np.array(targets, dtype=float)
        node = np.ones(len(targets), dtype=np.int64)
        for _ in range(self.depth):
            left = self.tree[2 * node]
            go_right = targets >= left
            targets = np.where(go_right, targets - left, targets)
            node = 2 * node + go_right
        return node - self.size


class PrioritizedReplayBuffer:
    """
    Fixed-capacity proportional PER buffer

    New items enter with the current maximum priority. When full, the oldest
    non-demonstration item is evicted first; demonstration items are evicted
    only when no other item remains.
    """

    def __init__(self, capacity: int = 100_000, seed: int = 0):
        """
        Initialize replay buffer

        Args:
            capacity: Maximum number of stored transitions
            seed: Seed of the sampling generator
        """
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._items: List[Optional[ReplayItem]] = [None] * capacity
        self._priorities = np.zeros(capacity)
        self._free = deque(range(capacity))
        self._agent_slots = deque()
        self._demo_slots = deque()
        self._max_priority = 1.0
        self._tree = SumTree(capacity)
        self._tree_alpha: Optional[float] = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.capacity - len(self._free)

    @property
    def n_demo(self) -> int:
        return len(self._demo_slots)

    def _evict(self) -> int:
        queue = self._agent_slots if self._agent_slots else self._demo_slots
        slot = queue.popleft()
        self._items[slot] = None
        self._set_priority(slot, 0.0)
        return slot

    def _set_priority(self, slot: int, p: float):
        self._priorities[slot] = p
        if self._tree_alpha is not None:
            self._tree.update(slot, p ** self._tree_alpha if p > 0 else 0.0)

    def _scaled_tree(self, alpha: float) -> SumTree:
        # the tree holds p^alpha for the last alpha sampled with
        if self._tree_alpha != alpha:
            self._tree.rebuild(np.where(self._priorities > 0, self._priorities ** alpha, 0.0))
            self._tree_alpha = alpha
        return self._tree

    def append(self, item: ReplayItem, priority: Optional[float] = None) -> int:
        """Store an item and return its slot"""
        with self._lock:
            slot = self._free.popleft() if self._free else self._evict()
            self._items[slot] = item
            p = self._max_priority if priority is None else float(priority)
            if p <= 0:
                raise ValueError(f"priority must be positive, got {p}")
            self._set_priority(slot, p)
            self._max_priority = max(self._max_priority, p)
            (self._demo_slots if item.is_demo else self._agent_slots).append(slot)
            return slot

    def extend(self, items: Sequence[ReplayItem]) -> List[int]:
        return [self.append(item) for item in items]

    def items(self) -> List[ReplayItem]:
        return [it for it in self._items if it is not None]

    def priority(self, slot: int) -> float:
        return float(self._priorities[slot])

    def sample(self, batch_size: int, alpha: float = 0.6, beta: float = 0.4) -> SampledBatch:
        """
        Draw a batch with P(i) = p_i^alpha / sum_k p_k^alpha

        Importance weights are (N P(i))^-beta divided by the batch maximum.
        """
        with self._lock:
            n = len(self)
            if n == 0:
                raise ValueError("Cannot sample from an empty replay buffer")
            if batch_size > n:
                raise ValueError(f"batch_size {batch_size} exceeds buffer size {n}")

            tree = self._scaled_tree(alpha)
            total = tree.total
            indices = tree.find(self.rng.random(batch_size) * total)
            # rounding can land a target on an empty leaf at an interval edge
            empty = tree.leaves(indices) <= 0
            while np.any(empty):
                indices[empty] = tree.find(self.rng.random(int(empty.sum())) * total)
                empty = tree.leaves(indices) <= 0
            chosen = tree.leaves(indices) / total
            weights = (n * chosen) ** (-beta)
            weights = weights / weights.max()
            return SampledBatch(
                items=[self._items[i] for i in indices],
                indices=indices,
                probabilities=chosen,
                weights=weights
            )

    def update_priorities(self, indices: Sequence[int], td_errors: Sequence[float]):
        """Set priorities to |TD error| + 1e-3"""
        with self._lock:
            for slot, err in zip(indices, td_errors):
                if self._items[slot] is None:
                    continue
                p = abs(float(err)) + PRIORITY_EPSILON
                self._set_priority(slot, p)
                self._max_priority = max(self._max_priority, p)

    def get_info(self) -> Dict:
        """
        Get buffer information

        Returns:
            Dictionary with buffer stats
        """
        occupied = self._priorities[self._priorities > 0]
        return {
            "capacity": self.capacity,
            "size": len(self),
            "demo_items": self.n_demo,
            "agent_items": len(self._agent_slots),
            "max_priority": self._max_priority,
            "mean_priority": float(occupied.mean()) if occupied.size else 0.0
        }
