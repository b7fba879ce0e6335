#!/usr/bin/env python3
"""
Scripted Demonstration Generator for the AnimaRL Simulator
Rule-based chasers and evader producing labelled demonstration episodes
"""

import math
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from chase_env import (
    AgentState,
    ChaseEscapeEnv,
    WorldConfig,
    heading_of,
    nearest_action,
)
from data_io import Episode

# Condition flags (reported as 1 = independent reward, 2 = shared reward)
INDEPENDENT = 0
SHARED = 1
# local-frame action pointing along the current heading
AHEAD = 1


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = float(np.hypot(vector[0], vector[1]))
    if norm == 0.0:
        return np.zeros(2)
    return vector / norm


def _rotate(vector: np.ndarray, degrees: float) -> np.ndarray:
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    return np.array([c * vector[0] - s * vector[1], s * vector[0] + c * vector[1]])


def _steer(state: AgentState, desired_velocity: np.ndarray, d: float, hold_degrees: float = 0.0) -> int:
    """
    Action whose direction best closes the gap to a desired velocity

    While the desired direction stays within hold_degrees of the current
    heading the agent keeps pushing straight ahead, so runs on a steady
    bearing build up to top speed.
    """
    heading = heading_of(state.velocity)
    direction = _unit(desired_velocity)
    if hold_degrees > 0 and direction.any():
        if float(direction @ heading) >= math.cos(math.radians(hold_degrees)):
            return AHEAD
    needed = desired_velocity - (1.0 - d) * state.velocity
    return nearest_action(needed, heading)


class ScriptedChaser:
    """
    Pursuit policy for one chaser

    mode="direct" steers at the evader's predicted position. mode="flank"
    first heads for a point offset at +/-45 degrees from the evader's heading
    and switches to direct pursuit once within flank_switch_distance.
    """

    def __init__(
        self,
        config: WorldConfig,
        agent_index: int,
        mode: str = "direct",
        flank_offset: float = 0.4,
        flank_switch_distance: float = 0.35,
        hold_degrees: float = 20.0
    ):
        if mode not in ("direct", "flank"):
            raise ValueError(f"Unknown chaser mode: {mode}")
        self.config = config
        self.agent_index = agent_index
        self.mode = mode
        self.flank_offset = flank_offset
        self.flank_switch_distance = flank_switch_distance
        self.hold_degrees = hold_degrees
        mobility = config.mobility(agent_index)
        self.d = mobility.d
        self.top_speed = mobility.u * config.dt / mobility.d if mobility.d > 0 else mobility.u
        # chaser 0 flanks on the left, chaser 1 on the right, and so on
        self.side = 1.0 if agent_index % 2 == 0 else -1.0

    def act(self, states: Sequence[AgentState]) -> int:
        me = states[self.agent_index]
        evaders = [states[e] for e in self.config.evader_indices]
        target = min(evaders, key=lambda s: float(np.linalg.norm(s.position - me.position)))

        distance = float(np.linalg.norm(target.position - me.position))
        lead_time = min(distance / max(self.top_speed, 1e-9), 1.0)
        aim = target.position + target.velocity * lead_time

        if self.mode == "flank" and distance > self.flank_switch_distance:
            bearing = _rotate(heading_of(target.velocity), self.side * 45.0)
            aim = aim + self.flank_offset * bearing
            limit = self.config.arena_half_width - 0.1
            aim = np.clip(aim, -limit, limit)

        desired = self.top_speed * _unit(aim - me.position)
        return _steer(me, desired, self.d, self.hold_degrees)


class ScriptedEvader:
    """Flee the nearest chaser, pushed back toward the centre near the walls"""

    def __init__(
        self,
        config: WorldConfig,
        agent_index: int,
        wall_margin: float = 0.6,
        hold_degrees: float = 30.0
    ):
        self.config = config
        self.agent_index = agent_index
        self.wall_margin = wall_margin
        self.hold_degrees = hold_degrees
        mobility = config.mobility(agent_index)
        self.d = mobility.d
        self.top_speed = mobility.u * config.dt / mobility.d if mobility.d > 0 else mobility.u

    def act(self, states: Sequence[AgentState]) -> int:
        me = states[self.agent_index]
        chasers = [states[c] for c in self.config.chaser_indices]
        nearest = min(chasers, key=lambda s: float(np.linalg.norm(s.position - me.position)))
        away = _unit(me.position - nearest.position)

        push = np.zeros(2)
        span = max(self.config.arena_half_width - self.wall_margin, 1e-9)
        for axis in range(2):
            excess = abs(me.position[axis]) - self.wall_margin
            if excess > 0:
                push[axis] = -math.copysign(2.0 * excess / span, me.position[axis])

        desired = self.top_speed * _unit(away + push)
        return _steer(me, desired, self.d, self.hold_degrees)


def scripted_team(config: WorldConfig, condition: int) -> List[object]:
    """One scripted controller per agent for the given condition flag"""
    mode = "flank" if condition == SHARED else "direct"
    team = [ScriptedChaser(config, c, mode=mode) for c in config.chaser_indices]
    team += [ScriptedEvader(config, e) for e in config.evader_indices]
    return team


def episode_seeds(seed: int, n_episodes: int) -> np.ndarray:
    """Deterministic per-episode reset seeds derived from one run seed"""
    return np.random.default_rng(seed).integers(0, 2**62, size=n_episodes)


def generate_demos(
    config: WorldConfig,
    n_episodes: int,
    condition: int,
    seed: int,
    first_episode_id: int = 0,
    verbose: bool = False
) -> List[Episode]:
    """
    Roll out the scripted policies to build a demonstration dataset

    Condition 0 chasers pursue directly and are rewarded independently;
    condition 1 chasers flank and share the contact reward, which yields
    longer chaser paths.

    Args:
        config: World configuration (d and u define the dynamics)
        n_episodes: Number of episodes
        condition: 0 or 1
        seed: Run seed
        first_episode_id: Id assigned to the first episode
        verbose: Show a progress bar

    Returns:
        List of episodes with recorded actions and outcomes
    """
    if condition not in (INDEPENDENT, SHARED):
        raise ValueError(f"condition must be 0 or 1, got {condition}")

    env = ChaseEscapeEnv(config, shared_reward=condition == SHARED)
    team = scripted_team(config, condition)
    episodes = []

    iterator = enumerate(episode_seeds(seed, n_episodes))
    if verbose:
        iterator = tqdm(iterator, total=n_episodes, desc=f"Generating condition {condition + 1}")

    for i, episode_seed in iterator:
        env.reset(int(episode_seed))
        while not env.done:
            env.step([agent.act(env.states) for agent in team])
        episodes.append(env.to_episode(first_episode_id + i, condition))

    return episodes


def generate_both_conditions(
    config: WorldConfig,
    n_episodes: int,
    seed: int,
    verbose: bool = False
) -> List[Episode]:
    """Split n_episodes across both conditions (condition 0 gets the remainder)"""
    n_first = n_episodes - n_episodes // 2
    first = generate_demos(config, n_first, INDEPENDENT, seed, 0, verbose)
    second = generate_demos(config, n_episodes // 2, SHARED, seed + 1, n_first, verbose)
    return first + second
