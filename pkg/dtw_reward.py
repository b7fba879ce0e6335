#!/usr/bin/env python3
"""
DTW Reward Shaping for the AnimaRL Simulator
Warping-matrix alignment to demonstrations, incremental pseudo-reward and reward mixing
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from data_io import Episode


def state_features(positions: np.ndarray) -> np.ndarray:
    """
    Flatten all-agent positions into DTW state vectors

    Args:
        positions: (T, K, 2) trajectory or (K, 2) single sample

    Returns:
        (T, 2K) or (2K,) array
    """
    positions = np.asarray(positions, dtype=float)
    if positions.ndim == 2:
        return positions.reshape(-1)
    return positions.reshape(positions.shape[0], -1)


def _as_sequence(seq: Sequence) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def _next_row(previous: Optional[np.ndarray], local: np.ndarray) -> np.ndarray:
    """One row of the cumulative-cost recursion"""
    if previous is None:
        return np.cumsum(local)
    row = np.empty_like(local)
    row[0] = local[0] + previous[0]
    for j in range(1, local.shape[0]):
        row[j] = local[j] + min(previous[j], row[j - 1], previous[j - 1])
    return row


@dataclass
class DtwResult:
    """Full warping matrix and the final alignment cost"""
    matrix: np.ndarray
    distance: float


def dtw_full(a: Sequence, b: Sequence) -> DtwResult:
    """
    Full dynamic time warping between two sequences

    W[t][j] = |a_t - b_j| + min(W[t-1][j], W[t][j-1], W[t-1][j-1])
    with Euclidean local cost and no warping window.

    Args:
        a: n vectors (or scalars)
        b: m vectors of the same dimension

    Returns:
        DtwResult with the n x m matrix and W[n-1][m-1]
    """
    a = _as_sequence(a)
    b = _as_sequence(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError(f"DTW needs non-empty sequences, got lengths {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Vector dimensions differ: {a.shape[1]} vs {b.shape[1]}")

    local = cdist(a, b, metric="euclidean")
    matrix = np.empty_like(local)
    row = None
    for t in range(local.shape[0]):
        row = _next_row(row, local[t])
        matrix[t] = row
    return DtwResult(matrix=matrix, distance=float(matrix[-1, -1]))


@dataclass(frozen=True)
class WarpState:
    """Running DTW alignment of a growing simulated history to one expert sequence"""
    expert_sequence: np.ndarray
    current_row: Optional[np.ndarray] = None
    t: int = 0

    @classmethod
    def start(cls, expert_sequence: Sequence) -> "WarpState":
        expert = _as_sequence(expert_sequence)
        if expert.shape[0] == 0:
            raise ValueError("Expert sequence is empty")
        return cls(expert_sequence=expert)

    @property
    def aligned_index(self) -> int:
        """Expert index the latest simulated step is aligned to (first minimum)"""
        if self.current_row is None:
            return 0
        return int(np.argmin(self.current_row))


def append_step(ws: WarpState, s_t: Sequence) -> Tuple[WarpState, float]:
    """
    Extend the alignment by one simulated state in O(m)

    Returns:
        (updated WarpState, R_dtw) with R_dtw = min_j W[t][j]
    """
    s_t = np.asarray(s_t, dtype=float).reshape(1, -1)
    if s_t.shape[1] != ws.expert_sequence.shape[1]:
        raise ValueError(
            f"State dimension {s_t.shape[1]} does not match expert dimension "
            f"{ws.expert_sequence.shape[1]}"
        )
    local = cdist(s_t, ws.expert_sequence, metric="euclidean")[0]
    row = _next_row(ws.current_row, local)
    return WarpState(expert_sequence=ws.expert_sequence, current_row=row, t=ws.t + 1), float(row.min())


def mix_reward(touch: float, dtw_pseudo: float, alpha: float) -> float:
    """R = R_touch - alpha * R_dtw"""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return touch - alpha * dtw_pseudo


@dataclass(frozen=True)
class RewardMix:
    alpha: float
    touch_reward: float
    dtw_penalty: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def total(self) -> float:
        return mix_reward(self.touch_reward, self.dtw_penalty, self.alpha)

    @classmethod
    def apply(cls, touch: float, dtw_pseudo: float, alpha: float) -> "RewardMix":
        return cls(alpha=alpha, touch_reward=touch, dtw_penalty=dtw_pseudo)


def match_expert(episode_start: np.ndarray, demo_pool: Sequence[Episode]) -> Episode:
    """
    Demonstration whose start positions are closest to a rollout's start

    Ties go to the lowest episode id.

    Args:
        episode_start: (K, 2) start positions or the flattened 2K vector
        demo_pool: Candidate demonstrations

    Returns:
        The anchoring demonstration
    """
    if not demo_pool:
        raise ValueError("Demonstration pool is empty")
    start = np.asarray(episode_start, dtype=float).reshape(-1)
    best = None
    best_key = None
    for demo in demo_pool:
        vector = demo.start_vector()
        if vector.shape != start.shape:
            raise ValueError(
                f"Episode {demo.episode_id} has {vector.size // 2} agents, rollout has {start.size // 2}"
            )
        key = (float(np.linalg.norm(vector - start)), demo.episode_id)
        if best_key is None or key < best_key:
            best, best_key = demo, key
    return best


def anchor_distance(episode_start: np.ndarray, demo: Episode) -> float:
    """Euclidean distance between a rollout's start and a demonstration's start"""
    return float(np.linalg.norm(demo.start_vector() - np.asarray(episode_start, dtype=float).reshape(-1)))
