#!/usr/bin/env python3
"""
Policy Training for the AnimaRL Simulator
Offline pretraining on demonstrations, online fine-tuning, epsilon-greedy rollouts
"""

import copy
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from chase_env import (
    CHASER,
    EVADER,
    N_ACTIONS,
    AgentState,
    ChaseEscapeEnv,
    WorldConfig,
    observe,
)
from config_file import read_key_values, write_key_values
from data_io import Episode
from demo_generator import SHARED, ScriptedEvader, episode_seeds
from dtw_reward import WarpState, anchor_distance, append_step, match_expert, mix_reward, state_features
from qfunction import (
    METHODS,
    LossTerms,
    LossWeights,
    QNetwork,
    TransitionBatch,
    backward_with_reversal,
    hard_update,
    load_checkpoint,
    save_checkpoint,
    unroll,
)
from replay_buffer import PrioritizedReplayBuffer, ReplayItem

DOMAINS = ("agent", "biological")

LOG_COLUMNS = [
    "step", "phase", "epoch", "agent", "td_loss", "l2_loss", "treatment_loss",
    "supervision_loss", "total_loss", "epsilon", "mean_return", "far_anchors"
]


class Schedule(BaseModel):
    """Exploration schedule, horizon, target sync interval and learning rates"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    eps_start: float = Field(default=0.1, ge=0, le=1)
    eps_finish: float = Field(default=0.1, ge=0, le=1)
    decay_steps: int = Field(default=50_000, ge=0)
    eps_test: float = Field(default=0.1, ge=0, le=1)
    total_steps: int = Field(default=1_005_000, ge=0)
    target_sync_interval: int = Field(default=2_000, ge=1)
    learning_rate: float = Field(default=1e-6, gt=0, description="Online learning rate")
    offline_learning_rate: float = Field(default=1e-6, gt=0)
    offline_epochs: int = Field(default=30, ge=0)

    @model_validator(mode="after")
    def _check_eps(self) -> "Schedule":
        if self.eps_finish > self.eps_start:
            raise ValueError(f"eps_finish ({self.eps_finish}) must not exceed eps_start ({self.eps_start})")
        return self

    def epsilon(self, step: int) -> float:
        """Linear decay over decay_steps, constant afterwards"""
        if self.decay_steps == 0 or step >= self.decay_steps:
            return self.eps_finish
        fraction = max(step, 0) / self.decay_steps
        return self.eps_start + fraction * (self.eps_finish - self.eps_start)

    @classmethod
    def for_domain(cls, domain: str = "agent", pretrained: bool = False, method: str = "dqdil") -> "Schedule":
        """
        Exploration and learning-rate presets

        agent: 0.1 -> 0.1 from scratch, 0.3 -> 0.1 after pretraining, test 0.1
        biological: 0.5 -> 0.3 either way, test 0.5
        BC and DQAAS use 1e-3; online after pretraining uses the reduced rate.
        """
        if domain not in DOMAINS:
            raise ValueError(f"Unknown domain '{domain}', expected one of {DOMAINS}")
        if method not in METHODS:
            raise ValueError(f"Unknown method '{method}', expected one of {METHODS}")

        if domain == "agent":
            eps = (0.3, 0.1) if pretrained else (0.1, 0.1)
            eps_test = 0.1
            base_lr, reduced_lr = 1e-6, 1e-6
        else:
            eps = (0.5, 0.3)
            eps_test = 0.5
            base_lr, reduced_lr = 1e-4, 1e-5

        if method in ("bc", "dqaas"):
            base_lr = reduced_lr = 1e-3
        return cls(
            eps_start=eps[0],
            eps_finish=eps[1],
            eps_test=eps_test,
            learning_rate=reduced_lr if pretrained else base_lr,
            offline_learning_rate=base_lr
        )


class RunConfig(BaseModel):
    """Every hyperparameter of one training run"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: str = "dqdil"
    pretrain: bool = True
    domain: str = "agent"
    seed: int = 0
    replay_capacity: int = Field(default=100_000, ge=1)
    batch_size: int = Field(default=32, ge=1)
    per_alpha: float = Field(default=0.6, ge=0)
    per_beta_start: float = Field(default=0.4, ge=0, le=1)
    per_beta_end: float = Field(default=1.0, ge=0, le=1)
    warmup_steps: int = Field(default=1_000, ge=0)
    log_interval: int = Field(default=1_000, ge=1)
    eval_interval: int = Field(default=10_000, ge=0, description="Evaluation snapshot period, 0 disables")
    eval_episodes: int = Field(default=5, ge=1)
    anchor_warn_distance: float = Field(default=0.5, gt=0)
    co_train_evader: bool = False
    schedule: Schedule = Schedule()
    offline_weights: LossWeights = LossWeights.for_method("dqdil", "offline")
    online_weights: LossWeights = LossWeights.for_method("dqdil", "online")

    @model_validator(mode="after")
    def _check_method(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ValueError(f"Unknown method '{self.method}', expected one of {METHODS}")
        if self.domain not in DOMAINS:
            raise ValueError(f"Unknown domain '{self.domain}', expected one of {DOMAINS}")
        return self

    @classmethod
    def preset(cls, method: str, pretrain: bool = True, domain: str = "agent", **overrides) -> "RunConfig":
        """
        Build a run config from the method/domain presets

        Schedule fields (e.g. total_steps, learning_rate) may be passed as overrides too.
        """
        schedule_fields = set(Schedule.model_fields)
        schedule_overrides = {k: overrides.pop(k) for k in list(overrides) if k in schedule_fields}
        schedule = Schedule.for_domain(domain, pretrained=pretrain and method != "dqn", method=method)
        if schedule_overrides:
            schedule = Schedule.model_validate({**schedule.model_dump(), **schedule_overrides})
        return cls(
            method=method,
            pretrain=pretrain,
            domain=domain,
            schedule=schedule,
            offline_weights=LossWeights.for_method(method, "offline"),
            online_weights=LossWeights.for_method(method, "online"),
            **overrides
        )

    @property
    def shaping(self) -> bool:
        return self.method in ("dqdil", "dqcil")

    def beta(self, step: int) -> float:
        """PER importance exponent annealed linearly over the run"""
        total = max(self.schedule.total_steps, 1)
        fraction = min(max(step, 0) / total, 1.0)
        return self.per_beta_start + fraction * (self.per_beta_end - self.per_beta_start)

    def to_config_file(self, path: Union[str, Path]) -> Path:
        """Write as KEY=value lines; nested fields use a double underscore"""
        values = {}
        for name, value in self.model_dump().items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    values[f"{name}__{sub}"] = v
            else:
                values[name] = value
        return write_key_values(path, values, header="AnimaRL run config")

    @classmethod
    def from_config_file(cls, path: Union[str, Path]) -> "RunConfig":
        nested: Dict = {}
        for key, value in read_key_values(path).items():
            if "__" in key:
                outer, inner = key.split("__", 1)
                nested.setdefault(outer, {})[inner] = value
            else:
                nested[key] = value
        return cls.model_validate(nested)


class TrainingLog:
    """Append-only CSV training log"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.rows: List[Dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, rows: Sequence[Dict]):
        rows = [{col: row.get(col, np.nan) for col in LOG_COLUMNS} for row in rows]
        if not rows:
            return
        self.rows.extend(rows)
        if self.path is not None:
            frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
            frame.to_csv(self.path, mode="a", header=not self.path.exists(), index=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability epsilon, else the first argmax"""
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(q_values))


class Policy(Protocol):
    """Anything that picks an action from one agent's observation"""

    def reset(self) -> None: ...

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int: ...


class PolicyAgent:
    """Online/target Q-networks, optimizer and replay buffer of one learned agent"""

    def __init__(
        self,
        agent_index: int,
        obs_dim: int,
        run_config: RunConfig,
        learning_rate: Optional[float] = None,
        network: Optional[QNetwork] = None
    ):
        """
        Initialize agent

        Args:
            agent_index: Index of the controlled agent in the world
            obs_dim: Observation length
            run_config: Run hyperparameters (replay, seed, schedule)
            learning_rate: Adam step size, the offline rate when None
            network: Start from this network instead of a fresh initialization
        """
        self.agent_index = agent_index
        self.run_config = run_config
        seed = run_config.seed * 1000 + agent_index
        if network is None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                network = QNetwork(obs_dim)
        self.online = network
        self.target = copy.deepcopy(network)
        for p in self.target.parameters():
            p.requires_grad_(False)
        lr = learning_rate if learning_rate is not None else run_config.schedule.offline_learning_rate
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=lr)
        self.buffer = PrioritizedReplayBuffer(run_config.replay_capacity, seed=seed)
        self.hidden = self.online.initial_hidden()

    def reset(self):
        self.hidden = self.online.initial_hidden()

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
        with torch.no_grad():
            out = self.online(obs, self.hidden)
        self.hidden = out.hidden
        return epsilon_greedy(out.q_values.numpy(), epsilon, rng)

    def set_learning_rate(self, lr: float):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def sync_target(self):
        hard_update(self.target, self.online)

    def update(self, batch: TransitionBatch, weights: LossWeights, method: str) -> LossTerms:
        """One Adam step on the method objective"""
        terms, _ = backward_with_reversal(self.online, self.target, weights, batch, method)
        self.optimizer.step()
        return terms

    def learn(self, weights: LossWeights, method: str, beta: float) -> LossTerms:
        """Sample from PER, take a gradient step and refresh the sampled priorities"""
        sampled = self.buffer.sample(self.run_config.batch_size, self.run_config.per_alpha, beta)
        terms = self.update(sampled.to_transitions(), weights, method)
        if terms.td_errors is not None:
            self.buffer.update_priorities(sampled.indices, terms.td_errors)
        return terms


class DemoReplayPolicy:
    """Replays one agent's recorded demonstration actions, action 0 after they run out"""

    def __init__(self, demo: Episode, agent_index: int):
        self.demo = demo
        self.agent_index = agent_index
        self.t = 0

    def reset(self):
        self.t = 0

    def act(self, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
        t, self.t = self.t, self.t + 1
        if t >= self.demo.n_steps - 1:
            return 0
        return max(int(self.demo.actions[t, self.agent_index]), 0)


def episode_states(episode: Episode, t: int) -> List[AgentState]:
    """Agent states of a recorded episode at sample t"""
    return [
        AgentState(position=episode.positions[t, k].copy(), velocity=episode.velocities[t, k].copy(), role=role)
        for k, role in enumerate(episode.roles)
    ]


def demo_rewards(episode: Episode, config: WorldConfig) -> np.ndarray:
    """
    Environment rewards of a recorded episode, shape (T - 1, K)

    Mirrors the environment: evaders earn dt per surviving step, the final
    transition carries the contact reward or the boundary penalty.
    """
    n = episode.n_steps - 1
    rewards = np.zeros((max(n, 0), episode.n_agents))
    if n <= 0:
        return rewards

    evaders = episode.role_indices(EVADER)
    chasers = episode.role_indices(CHASER)
    rewards[:, evaders] += config.dt

    final = episode.positions[-1]
    if episode.outcome == "contact":
        pairs = [
            (c, e) for c in chasers for e in evaders
            if float(np.linalg.norm(final[c] - final[e])) <= config.agent_diameter
        ]
        caught = sorted({e for _, e in pairs})
        rewarded = chasers if episode.condition == SHARED else sorted({c for c, _ in pairs})
        rewards[-1, caught] -= config.dt
        rewards[-1, rewarded] += config.contact_reward
    elif episode.outcome == "boundary":
        offenders = [k for k in range(episode.n_agents) if float(np.max(np.abs(final[k]))) > config.boundary_half_width]
        for k in offenders:
            if k in evaders:
                rewards[-1, k] -= config.dt
            rewards[-1, k] += config.boundary_penalty
    return rewards


def dtw_pseudo_rewards(episode: Episode, anchor: Episode) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-transition R_dtw against an anchor demonstration and the aligned anchor index of each state

    Returns:
        (pseudo rewards of length T - 1, aligned indices of length T - 1)
    """
    features = state_features(episode.positions)
    ws = WarpState.start(state_features(anchor.positions))
    ws, _ = append_step(ws, features[0])
    pseudo = np.zeros(episode.n_steps - 1)
    aligned = np.zeros(episode.n_steps - 1, dtype=int)
    for t in range(episode.n_steps - 1):
        aligned[t] = ws.aligned_index
        ws, pseudo[t] = append_step(ws, features[t + 1])
    return pseudo, aligned


def demo_transitions(
    episode: Episode,
    agent_index: int,
    config: WorldConfig,
    alpha: float = 0.0,
    anchor: Optional[Episode] = None
) -> Dict[str, np.ndarray]:
    """
    Transitions of one agent in a demonstration

    With alpha > 0 the rewards are mixed with the DTW pseudo-reward against the anchor.
    """
    if not episode.has_actions:
        raise ValueError(f"Episode {episode.episode_id} has no actions; label it with infer_actions first")
    n = episode.n_steps - 1
    obs = np.stack([observe(episode_states(episode, t), agent_index, episode.condition) for t in range(n + 1)])
    rewards = demo_rewards(episode, config)[:, agent_index]
    if alpha > 0 and anchor is not None:
        pseudo, _ = dtw_pseudo_rewards(episode, anchor)
        rewards = np.array([mix_reward(r, p, alpha) for r, p in zip(rewards, pseudo)])
    terminals = np.zeros(n)
    terminals[-1] = 1.0
    actions = episode.actions[:-1, agent_index].astype(int)
    return {
        "obs": obs[:-1],
        "next_obs": obs[1:],
        "actions": actions,
        "rewards": rewards,
        "terminals": terminals,
        "conditions": np.full(n, float(episode.condition)),
        "expert_actions": actions.copy()
    }


def shaping_anchor(episode: Episode, demos: Sequence[Episode]) -> Episode:
    """Nearest-start demonstration other than the episode itself (itself when alone)"""
    others = [d for d in demos if d.episode_id != episode.episode_id and d.condition == episode.condition]
    return match_expert(episode.positions[0], others) if others else episode


def learned_indices(config: WorldConfig, run_config: RunConfig) -> List[int]:
    indices = list(config.chaser_indices)
    if run_config.co_train_evader:
        indices += list(config.evader_indices)
    return indices


def make_agents(config: WorldConfig, run_config: RunConfig) -> Dict[int, PolicyAgent]:
    return {k: PolicyAgent(k, config.obs_dim, run_config) for k in learned_indices(config, run_config)}


def pretrain_offline(
    agents: Dict[int, PolicyAgent],
    demos: Sequence[Episode],
    config: WorldConfig,
    run_config: RunConfig,
    log: Optional[TrainingLog] = None,
    verbose: bool = False
) -> Dict[int, PolicyAgent]:
    """
    Offline pretraining over the demonstrations for schedule.offline_epochs epochs

    Each episode is unrolled from a zero hidden state to get the stored
    hidden states, then all its transitions form one batch. DQN skips this
    phase entirely.

    Returns:
        The same agents, trained in place
    """
    method = run_config.method
    if method == "dqn":
        return agents
    demos = [d for d in demos if d.n_steps >= 2]
    if not demos:
        raise ValueError("pretrain_offline needs at least one demonstration with two samples")

    weights = run_config.offline_weights
    log = log or TrainingLog()
    rng = np.random.default_rng(run_config.seed)

    # transitions do not depend on the network, build them once
    prepared = {}
    for k in agents:
        prepared[k] = []
        for demo in demos:
            anchor = shaping_anchor(demo, demos) if run_config.shaping else None
            prepared[k].append(demo_transitions(demo, k, config, weights.alpha, anchor))

    epochs = range(1, run_config.schedule.offline_epochs + 1)
    if verbose:
        print(f"🚀 Offline pretraining ({method}) on {len(demos)} demonstrations")
        epochs = tqdm(epochs, desc="Offline epochs")

    for epoch in epochs:
        order = rng.permutation(len(demos))
        rows = []
        for k, agent in agents.items():
            agent.set_learning_rate(run_config.schedule.offline_learning_rate)
            sums = {"td_loss": 0.0, "l2_loss": 0.0, "treatment_loss": 0.0, "supervision_loss": 0.0, "total_loss": 0.0}
            for i in order:
                data = prepared[k][i]
                with torch.no_grad():
                    _, _, hiddens = unroll(agent.online, data["obs"])
                batch = TransitionBatch.from_arrays(
                    obs=data["obs"],
                    actions=data["actions"],
                    rewards=data["rewards"],
                    next_obs=data["next_obs"],
                    terminals=data["terminals"],
                    conditions=data["conditions"],
                    hidden=hiddens[:-1].numpy(),
                    expert_actions=data["expert_actions"]
                )
                terms = agent.update(batch, weights, method)
                for key, value in terms.as_dict().items():
                    sums[key] += value
            # target follows the online net once per epoch offline
            agent.sync_target()
            row = {key: value / len(order) for key, value in sums.items()}
            row.update({"step": 0, "phase": "offline", "epoch": epoch, "agent": k, "epsilon": np.nan, "mean_return": np.nan})
            rows.append(row)
        log.append(rows)

    if verbose:
        print(f"✅ Offline pretraining finished ({run_config.schedule.offline_epochs} epochs)")
    return agents


def _evader_controllers(
    config: WorldConfig,
    agents: Dict[int, PolicyAgent],
    anchor: Optional[Episode]
) -> Dict[int, object]:
    controllers = {}
    for e in config.evader_indices:
        if e in agents:
            continue
        controllers[e] = DemoReplayPolicy(anchor, e) if anchor is not None else ScriptedEvader(config, e)
    return controllers


def train_online(
    agents: Dict[int, PolicyAgent],
    config: WorldConfig,
    run_config: RunConfig,
    demo_pool: Optional[Sequence[Episode]] = None,
    log: Optional[TrainingLog] = None,
    verbose: bool = False
) -> Tuple[Dict[int, PolicyAgent], TrainingLog]:
    """
    Online fine-tuning in the chase-and-escape environment

    Each episode samples a condition present in the demonstration pool and
    anchors to the nearest-start demonstration of that condition. DQDIL and
    DQCIL mix the DTW pseudo-reward into the environment reward, DQAAS
    supervises toward the anchor action at the DTW-aligned index. One
    optimizer step per environment step after warm-up.

    Returns:
        (agents, log)
    """
    schedule = run_config.schedule
    weights = run_config.online_weights
    method = run_config.method
    log = log or TrainingLog()
    pool = list(demo_pool or [])
    if method == "bc":
        return agents, log
    if (run_config.shaping or method == "dqaas") and not pool:
        raise ValueError(f"Method '{method}' needs a demonstration pool for online training")

    for agent in agents.values():
        agent.set_learning_rate(schedule.learning_rate)
        agent.sync_target()

    conditions = sorted({d.condition for d in pool}) or [0, 1]
    rng = np.random.default_rng(run_config.seed)
    env = ChaseEscapeEnv(config)
    step = 0
    episode_count = 0
    far_anchors = 0
    window_terms: Dict[int, List[LossTerms]] = {k: [] for k in agents}
    window_returns: List[float] = []

    progress = tqdm(total=schedule.total_steps, desc=f"Online {method}") if verbose else None
    if verbose:
        print(f"🚀 Online training ({method}) for {schedule.total_steps} steps")

    while step < schedule.total_steps:
        condition = int(conditions[rng.integers(len(conditions))])
        env.shared_reward = condition == SHARED
        env.reset(int(rng.integers(0, 2**62)))
        start = np.stack([s.position for s in env.states])

        candidates = [d for d in pool if d.condition == condition]
        anchor = match_expert(start, candidates) if candidates else None
        if anchor is not None and anchor_distance(start, anchor) > run_config.anchor_warn_distance:
            far_anchors += 1
        ws = None
        if anchor is not None and (run_config.shaping or method == "dqaas"):
            ws, _ = append_step(WarpState.start(state_features(anchor.positions)), state_features(start))

        for agent in agents.values():
            agent.reset()
        controllers = _evader_controllers(config, agents, anchor)
        for c in controllers.values():
            if hasattr(c, "reset"):
                c.reset()

        episode_return = 0.0
        while not env.done and step < schedule.total_steps:
            epsilon = schedule.epsilon(step)
            joint = [0] * config.n_agents
            pending = {}
            for k, agent in agents.items():
                obs = env.observe(k, condition)
                hidden = agent.hidden.numpy().copy()
                joint[k] = agent.act(obs, epsilon, rng)
                pending[k] = (obs, hidden)
            for e, controller in controllers.items():
                if isinstance(controller, ScriptedEvader):
                    joint[e] = controller.act(env.states)
                else:
                    joint[e] = controller.act(None, 0.0, rng)

            expert = {}
            if ws is not None and method == "dqaas":
                j = min(ws.aligned_index, anchor.n_steps - 2)
                expert = {k: int(anchor.actions[j, k]) if j >= 0 else -1 for k in agents}

            outcome = env.step(joint)
            pseudo = 0.0
            if ws is not None:
                ws, pseudo = append_step(ws, state_features(np.stack([s.position for s in env.states])))

            for k, agent in agents.items():
                reward = float(outcome.rewards[k])
                if run_config.shaping:
                    reward = mix_reward(reward, pseudo, weights.alpha)
                obs, hidden = pending[k]
                agent.buffer.append(ReplayItem(
                    obs=obs,
                    action=joint[k],
                    reward=reward,
                    next_obs=env.observe(k, condition),
                    terminal=outcome.terminated,
                    condition=condition,
                    episode_id=episode_count,
                    step_index=env.step_count - 1,
                    hidden=hidden,
                    expert_action=expert.get(k, -1)
                ))
            episode_return += float(outcome.termination_cause == "contact")
            step += 1
            if progress is not None:
                progress.update(1)

            if step > run_config.warmup_steps:
                beta = run_config.beta(step)
                for k, agent in agents.items():
                    if len(agent.buffer) >= run_config.batch_size:
                        window_terms[k].append(agent.learn(weights, method, beta))

            if step % schedule.target_sync_interval == 0:
                for agent in agents.values():
                    agent.sync_target()

            if step % run_config.log_interval == 0:
                _flush_window(log, window_terms, window_returns, step, epsilon, far_anchors)

            if run_config.eval_interval and step % run_config.eval_interval == 0:
                snapshot = evaluate_snapshot(agents, config, run_config, pool, seed=run_config.seed + step)
                log.append([{
                    "step": step, "phase": "eval", "epoch": np.nan, "agent": -1,
                    "epsilon": schedule.eps_test, "mean_return": snapshot["contact_rate"]
                }])
                if verbose:
                    print(f"\n📊 Step {step}: contact rate {snapshot['contact_rate']:.2f}, "
                          f"chaser path {snapshot['mean_path_length']:.3f}")

        window_returns.append(episode_return)
        episode_count += 1

    if step % run_config.log_interval != 0:
        _flush_window(log, window_terms, window_returns, step, schedule.epsilon(step), far_anchors)
    if progress is not None:
        progress.close()
    if verbose:
        print(f"✅ Online training finished: {step} steps, {episode_count} episodes")
        if far_anchors:
            print(f"⚠️  {far_anchors} episodes started farther than {run_config.anchor_warn_distance} from their anchor")
    return agents, log


def _flush_window(
    log: TrainingLog,
    window_terms: Dict[int, List[LossTerms]],
    window_returns: List[float],
    step: int,
    epsilon: float,
    far_anchors: int = 0
):
    # far_anchors is the running count of episodes started far from their anchor
    mean_return = float(np.mean(window_returns)) if window_returns else np.nan
    rows = []
    for k, terms in window_terms.items():
        row = {"step": step, "phase": "online", "epoch": np.nan, "agent": k, "epsilon": epsilon, "mean_return": mean_return,
               "far_anchors": far_anchors}
        if terms:
            for key in ("td_loss", "l2_loss", "treatment_loss", "supervision_loss", "total_loss"):
                row[key] = float(np.mean([t.as_dict()[key] for t in terms]))
        rows.append(row)
        terms.clear()
    window_returns.clear()
    log.append(rows)


def rollout(
    team: Dict[int, Policy],
    config: WorldConfig,
    eps: float,
    n_episodes: int,
    condition_flag: int,
    seed: int,
    evader_pool: Optional[Sequence[Episode]] = None,
    first_episode_id: int = 0
) -> List[Episode]:
    """
    Run epsilon-greedy policies for all learned agents simultaneously

    Agents missing from team must be evaders; they replay the nearest-start
    demonstration of evader_pool or, without a pool, run the scripted evader.
    Episode i uses reset seed episode_seeds(seed)[i] and its own epsilon
    stream, so rollouts with the same seed and different condition flags
    are paired episode by episode.

    Args:
        team: Agent index -> policy
        config: World configuration
        eps: Exploration probability
        n_episodes: Number of episodes
        condition_flag: Condition cue fed to every policy (0 or 1)
        seed: Run seed
        evader_pool: Demonstrations whose evader actions are replayed

    Returns:
        Recorded episodes labelled with condition_flag
    """
    missing = [c for c in config.chaser_indices if c not in team]
    if missing:
        raise ValueError(f"No policy for chaser(s) {missing}")

    env = ChaseEscapeEnv(config, shared_reward=condition_flag == SHARED)
    episodes = []
    for i, episode_seed in enumerate(episode_seeds(seed, n_episodes)):
        rng = np.random.default_rng([seed, i])
        env.reset(int(episode_seed))
        start = np.stack([s.position for s in env.states])
        anchor = match_expert(start, evader_pool) if evader_pool else None
        controllers = {}
        for e in config.evader_indices:
            if e not in team:
                controllers[e] = DemoReplayPolicy(anchor, e) if anchor is not None else ScriptedEvader(config, e)
        for policy in team.values():
            policy.reset()

        while not env.done:
            joint = [0] * config.n_agents
            for k, policy in team.items():
                joint[k] = policy.act(env.observe(k, condition_flag), eps, rng)
            for e, controller in controllers.items():
                if isinstance(controller, ScriptedEvader):
                    joint[e] = controller.act(env.states)
                else:
                    joint[e] = controller.act(None, 0.0, rng)
            env.step(joint)
        episodes.append(env.to_episode(first_episode_id + i, condition_flag))
    return episodes


def evaluate_snapshot(
    agents: Dict[int, PolicyAgent],
    config: WorldConfig,
    run_config: RunConfig,
    pool: Sequence[Episode],
    seed: int
) -> Dict[str, float]:
    """Contact rate and mean chaser path length over a few eps_test rollouts"""
    conditions = sorted({d.condition for d in pool}) or [0]
    # snapshots run mid-episode; the training episode resumes from these
    saved = {k: agent.hidden for k, agent in agents.items()}
    episodes = []
    for condition in conditions:
        episodes += rollout(
            agents, config, run_config.schedule.eps_test, run_config.eval_episodes,
            condition, seed, evader_pool=[d for d in pool if d.condition == condition] or None
        )
    for k, agent in agents.items():
        agent.hidden = saved[k]
    return {
        "contact_rate": float(np.mean([ep.outcome == "contact" for ep in episodes])),
        "mean_path_length": float(np.mean([ep.mean_path_length(CHASER) for ep in episodes]))
    }


def run_training(
    config: WorldConfig,
    run_config: RunConfig,
    demos: Sequence[Episode],
    log: Optional[TrainingLog] = None,
    verbose: bool = False
) -> Tuple[Dict[int, PolicyAgent], TrainingLog]:
    """
    Full pipeline for one method

    bc: offline only. dqn: online only. Others: offline when pretrain is set, then online.
    """
    log = log or TrainingLog()
    agents = make_agents(config, run_config)
    method = run_config.method
    if method == "bc" or (run_config.pretrain and method != "dqn"):
        pretrain_offline(agents, demos, config, run_config, log, verbose)
    if method != "bc":
        train_online(agents, config, run_config, demos, log, verbose)
    return agents, log


def save_agents(
    agents: Dict[int, PolicyAgent],
    out_dir: Union[str, Path],
    config: WorldConfig,
    run_config: RunConfig
) -> List[Path]:
    """Write one checkpoint + manifest per learned agent, plus the world and run configs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.to_config_file(out_dir / "world.env")
    run_config.to_config_file(out_dir / "run.env")
    paths = []
    for k, agent in sorted(agents.items()):
        metadata = {"agent_index": k, "role": config.roles[k], "method": run_config.method}
        paths.append(save_checkpoint(agent.online, out_dir / f"agent{k}.pt", metadata))
    return paths


def load_agents(model_dir: Union[str, Path]) -> Tuple[Dict[int, PolicyAgent], WorldConfig, RunConfig]:
    """Load every agent checkpoint of a training output directory"""
    model_dir = Path(model_dir)
    config = WorldConfig.from_config_file(model_dir / "world.env")
    run_config = RunConfig.from_config_file(model_dir / "run.env")
    checkpoints = sorted(model_dir.glob("agent*.pt"))
    if not checkpoints:
        raise FileNotFoundError(f"No agent checkpoints in {model_dir}")
    agents = {}
    for path in checkpoints:
        net, metadata = load_checkpoint(path)
        k = int(metadata["agent_index"])
        agents[k] = PolicyAgent(k, net.obs_dim, run_config, network=net)
    return agents, config, run_config
