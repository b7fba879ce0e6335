#!/usr/bin/env python3
"""
Chase-and-Escape Environment for the AnimaRL Simulator
Damped discrete-input agent dynamics, 13-action set, termination rules and rewards
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config_file import load_model, save_model
from data_io import Episode

N_ACTIONS = 13
# Local-frame angles of actions 1..12 (action 0 is "no acceleration")
ACTION_ANGLES_DEG = np.arange(12) * 30.0
# Below this speed the local frame falls back to the world frame
REST_SPEED = 1e-8

CHASER = "chaser"
EVADER = "evader"

CAUSE_CONTACT = "contact"
CAUSE_TIMEOUT = "timeout"
CAUSE_BOUNDARY = "boundary"
CAUSE_NONE = "none"


class InvalidStateError(ValueError):
    """Raised when a state or velocity contains non-finite components"""


class DampedDynamics(Protocol):
    """Anything carrying a damping d and an input amplitude u"""
    d: float
    u: float


@dataclass(frozen=True)
class Mobility:
    """Per-agent locomotion parameters used by the environment"""
    d: float
    u: float


class WorldConfig(BaseModel):
    """Arena geometry, timing, agent counts, mobility and reward constants"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arena_half_width: float = Field(default=1.0, gt=0, description="Half width of the play field")
    boundary_half_width: float = Field(default=1.1, gt=0, description="Half width of the virtual boundary")
    init_half_width: float = Field(default=0.5, gt=0, description="Half width of the start square")
    dt: float = Field(default=0.1, gt=0, description="Step length in seconds")
    time_limit: float = Field(default=14.8, gt=0, description="Episode time limit in seconds")
    agent_diameter: float = Field(default=0.1, gt=0, description="Disc diameter of every agent")
    n_chasers: int = Field(default=2, ge=1)
    n_evaders: int = Field(default=1, ge=1)
    chaser_mobility_scale: float = Field(default=1.2, gt=0, description="Chaser u relative to the evader")
    damping: float = Field(default=0.25, ge=0, le=1, description="Damping d of the evader")
    input_amplitude: float = Field(default=3.0, ge=0, description="Input amplitude u of the evader")
    boundary_penalty: float = -10.0
    contact_reward: float = 1.0
    rng_seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "WorldConfig":
        if self.boundary_half_width <= self.arena_half_width:
            raise ValueError(
                f"boundary_half_width ({self.boundary_half_width}) must exceed "
                f"arena_half_width ({self.arena_half_width})"
            )
        return self

    @property
    def n_agents(self) -> int:
        return self.n_chasers + self.n_evaders

    @property
    def roles(self) -> List[str]:
        return [CHASER] * self.n_chasers + [EVADER] * self.n_evaders

    @property
    def chaser_indices(self) -> List[int]:
        return list(range(self.n_chasers))

    @property
    def evader_indices(self) -> List[int]:
        return list(range(self.n_chasers, self.n_agents))

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.time_limit / self.dt - 1e-9))

    @property
    def obs_dim(self) -> int:
        return 4 + 4 * (self.n_agents - 1) + 1

    def mobility(self, agent_index: int) -> Mobility:
        """Locomotion parameters of one agent (chasers get the scaled u)"""
        if agent_index < self.n_chasers:
            return Mobility(d=self.damping, u=self.input_amplitude * self.chaser_mobility_scale)
        return Mobility(d=self.damping, u=self.input_amplitude)

    def to_config_file(self, path: Union[str, Path]) -> Path:
        return save_model(self, path, header="AnimaRL world config")

    @classmethod
    def from_config_file(cls, path: Union[str, Path]) -> "WorldConfig":
        return load_model(cls, path)


@dataclass
class AgentState:
    """Position, velocity and status of one agent"""
    position: np.ndarray
    velocity: np.ndarray
    role: str
    alive: bool = True


@dataclass
class StepOutcome:
    """Result of advancing the world by one step"""
    next_states: List[AgentState]
    rewards: np.ndarray
    terminated: bool
    termination_cause: str = CAUSE_NONE
    winner_role: Optional[str] = None


def _build_action_set() -> np.ndarray:
    actions = np.zeros((N_ACTIONS, 2))
    radians = np.deg2rad(ACTION_ANGLES_DEG)
    actions[1:, 0] = np.cos(radians)
    actions[1:, 1] = np.sin(radians)
    return actions


# Local-frame unit vectors; row 0 is the zero vector
ACTION_SET = _build_action_set()


def heading_of(velocity: np.ndarray) -> np.ndarray:
    """Unit heading of a velocity, world x-axis when at rest"""
    speed = float(np.hypot(velocity[0], velocity[1]))
    if speed < REST_SPEED:
        return np.array([1.0, 0.0])
    return np.asarray(velocity, dtype=float) / speed


def local_to_world(local: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Rotate a local-frame vector so that local +x points along heading"""
    hx, hy = heading[0], heading[1]
    return np.array([hx * local[0] - hy * local[1], hy * local[0] + hx * local[1]])


def world_to_local(world: np.ndarray, heading: np.ndarray) -> np.ndarray:
    hx, hy = heading[0], heading[1]
    return np.array([hx * world[0] + hy * world[1], -hy * world[0] + hx * world[1]])


def action_vector(action_index: int, heading: np.ndarray) -> np.ndarray:
    """World-frame unit control direction of an action (zero for index 0)"""
    if not 0 <= action_index < N_ACTIONS:
        raise ValueError(f"action_index must be in 0..{N_ACTIONS - 1}, got {action_index}")
    if action_index == 0:
        return np.zeros(2)
    return local_to_world(ACTION_SET[action_index], heading)


def nearest_action(direction: np.ndarray, heading: np.ndarray) -> int:
    """
    Action index whose local-frame direction is closest to a world direction

    Exact ties between two neighbouring bins resolve to the lower index.
    A zero direction maps to action 0.
    """
    if float(np.hypot(direction[0], direction[1])) == 0.0:
        return 0
    local = world_to_local(np.asarray(direction, dtype=float), heading)
    angle = math.degrees(math.atan2(local[1], local[0])) % 360.0
    gaps = np.abs((angle - ACTION_ANGLES_DEG + 180.0) % 360.0 - 180.0)
    # round away float noise so that a 15 degree tie stays a tie
    gaps = np.round(gaps, 9)
    return int(np.argmin(gaps)) + 1


def velocity_transition(
    v: np.ndarray,
    action_index: int,
    params: DampedDynamics,
    heading: np.ndarray,
    dt: float
) -> np.ndarray:
    """
    One step of the damped discrete-input velocity model

        v' = (1 - d) * v + u * a * dt

    Args:
        v: Current velocity (2-vector)
        action_index: 0 (coast) or 1..12 (local-frame direction)
        params: Object with damping d in [0, 1] and amplitude u >= 0
        heading: Unit heading defining the local frame
        dt: Step length in seconds

    Returns:
        Next velocity
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)) or not np.all(np.isfinite(heading)):
        raise InvalidStateError(f"Non-finite velocity or heading: v={v}, heading={heading}")
    if not 0.0 <= params.d <= 1.0:
        raise ValueError(f"damping d must be in [0, 1], got {params.d}")
    if params.u < 0:
        raise ValueError(f"input amplitude u must be >= 0, got {params.u}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    a = action_vector(action_index, heading)
    return (1.0 - params.d) * v + params.u * a * dt


def reset(config: WorldConfig, seed: int) -> List[AgentState]:
    """
    Sample start positions uniformly from the start square, velocities zero

    Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    h = config.init_half_width
    positions = rng.uniform(-h, h, size=(config.n_agents, 2))
    return [
        AgentState(position=positions[i].copy(), velocity=np.zeros(2), role=role)
        for i, role in enumerate(config.roles)
    ]


def _contact_pairs(positions: np.ndarray, config: WorldConfig) -> List[tuple]:
    pairs = []
    for c in config.chaser_indices:
        for e in config.evader_indices:
            if float(np.linalg.norm(positions[c] - positions[e])) <= config.agent_diameter:
                pairs.append((c, e))
    return pairs


def step(
    state: Sequence[AgentState],
    joint_action: Sequence[int],
    config: WorldConfig,
    t: float,
    shared_reward: bool = False
) -> StepOutcome:
    """
    Advance every agent by one step and evaluate termination and rewards

    Precedence when several causes coincide: contact, boundary, timeout.
    Chasers pass through each other; only chaser-evader contact counts.

    Args:
        state: Per-agent states (chasers first, then evaders)
        joint_action: One action index per agent
        config: World configuration
        t: Elapsed time before this step
        shared_reward: If True every chaser is rewarded on contact

    Returns:
        StepOutcome with the new states and per-agent rewards
    """
    if len(joint_action) != len(state) or len(state) != config.n_agents:
        raise ValueError(
            f"Expected {config.n_agents} agents and actions, got "
            f"{len(state)} states and {len(joint_action)} actions"
        )
    if t > config.time_limit + 1e-9:
        raise ValueError(f"t={t} exceeds time_limit={config.time_limit}")
    if not all(s.alive for s in state):
        raise ValueError("step() called with an agent that is no longer alive")

    next_states = []
    for i, (s, a) in enumerate(zip(state, joint_action)):
        heading = heading_of(s.velocity)
        v_next = velocity_transition(s.velocity, int(a), config.mobility(i), heading, config.dt)
        p_next = s.position + v_next * config.dt
        if not np.all(np.isfinite(p_next)):
            raise InvalidStateError(f"Agent {i} position became non-finite: {p_next}")
        next_states.append(AgentState(position=p_next, velocity=v_next, role=s.role))

    positions = np.stack([s.position for s in next_states])
    rewards = np.zeros(config.n_agents)
    cause = CAUSE_NONE
    winner = None

    pairs = _contact_pairs(positions, config)
    offenders = [
        i for i in range(config.n_agents)
        if float(np.max(np.abs(positions[i]))) > config.boundary_half_width
    ]

    if pairs:
        cause, winner = CAUSE_CONTACT, CHASER
        rewarded = config.chaser_indices if shared_reward else sorted({c for c, _ in pairs})
        rewards[rewarded] += config.contact_reward
        for _, e in pairs:
            next_states[e].alive = False
    elif offenders:
        cause = CAUSE_BOUNDARY
        rewards[offenders] += config.boundary_penalty
        for i in offenders:
            next_states[i].alive = False
        offending_roles = {config.roles[i] for i in offenders}
        if offending_roles == {CHASER}:
            winner = EVADER
        elif offending_roles == {EVADER}:
            winner = CHASER
    elif t + config.dt >= config.time_limit - 1e-9:
        cause, winner = CAUSE_TIMEOUT, EVADER

    # time-proportional evader reward, accrued per surviving step
    for e in config.evader_indices:
        if next_states[e].alive:
            rewards[e] += config.dt

    return StepOutcome(
        next_states=next_states,
        rewards=rewards,
        terminated=cause != CAUSE_NONE,
        termination_cause=cause,
        winner_role=winner
    )


def observe(state: Sequence[AgentState], agent_index: int, condition_flag: int) -> np.ndarray:
    """
    Observation of one agent

    Layout: own position (2), own velocity (2), then for every other agent in
    index order its relative position (2) and relative velocity (2), then the
    binary condition flag.
    """
    if not 0 <= agent_index < len(state):
        raise ValueError(f"agent_index {agent_index} out of range for {len(state)} agents")
    own = state[agent_index]
    parts = [own.position, own.velocity]
    for j, other in enumerate(state):
        if j == agent_index:
            continue
        parts.append(other.position - own.position)
        parts.append(other.velocity - own.velocity)
    parts.append(np.array([float(condition_flag)]))
    return np.concatenate(parts)


class ChaseEscapeEnv:
    """Stateful chase-and-escape world that records its own trajectory"""

    def __init__(self, config: WorldConfig, shared_reward: bool = False):
        """
        Initialize environment

        Args:
            config: World configuration
            shared_reward: Reward every chaser on contact (shared-reward condition)
        """
        self.config = config
        self.shared_reward = shared_reward
        self.states: List[AgentState] = []
        self.step_count = 0
        self.done = True
        self.last_outcome: Optional[StepOutcome] = None
        self._positions: List[np.ndarray] = []
        self._velocities: List[np.ndarray] = []
        self._actions: List[np.ndarray] = []

    @property
    def t(self) -> float:
        return self.step_count * self.config.dt

    def reset(self, seed: Optional[int] = None) -> List[AgentState]:
        seed = self.config.rng_seed if seed is None else seed
        return self.reset_to(reset(self.config, seed))

    def reset_to(self, states: Sequence[AgentState]) -> List[AgentState]:
        """Start an episode from given states (e.g. a demonstration's start)"""
        self.states = [
            AgentState(position=np.array(s.position, dtype=float), velocity=np.array(s.velocity, dtype=float), role=s.role)
            for s in states
        ]
        self.step_count = 0
        self.done = False
        self.last_outcome = None
        self._positions = [np.stack([s.position for s in self.states])]
        self._velocities = [np.stack([s.velocity for s in self.states])]
        self._actions = []
        return self.states

    def observe(self, agent_index: int, condition_flag: int) -> np.ndarray:
        return observe(self.states, agent_index, condition_flag)

    def step(self, joint_action: Sequence[int]) -> StepOutcome:
        if self.done:
            raise RuntimeError("Episode finished; call reset() first")
        outcome = step(self.states, joint_action, self.config, self.t, shared_reward=self.shared_reward)
        self.states = outcome.next_states
        self.step_count += 1
        self.done = outcome.terminated
        self.last_outcome = outcome

        self._actions.append(np.asarray(joint_action, dtype=int))
        self._positions.append(np.stack([s.position for s in self.states]))
        self._velocities.append(np.stack([s.velocity for s in self.states]))
        return outcome

    def to_episode(self, episode_id: int, condition: int) -> Episode:
        """Package the recorded trajectory as an Episode"""
        n_steps = len(self._positions)
        actions = np.full((n_steps, self.config.n_agents), -1, dtype=int)
        if self._actions:
            actions[:-1] = np.stack(self._actions)

        outcome = self.last_outcome
        cause = outcome.termination_cause if outcome is not None else CAUSE_TIMEOUT
        winner = outcome.winner_role if outcome is not None else EVADER
        return Episode(
            episode_id=episode_id,
            condition=condition,
            dt=self.config.dt,
            roles=self.config.roles,
            positions=np.stack(self._positions),
            velocities=np.stack(self._velocities),
            actions=actions,
            outcome=cause if cause != CAUSE_NONE else CAUSE_TIMEOUT,
            winner_role=winner
        )
