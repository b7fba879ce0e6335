#!/usr/bin/env python3
"""
Episode Dataset I/O for the AnimaRL Simulator
Line-delimited episode files, stratified train/validation/test splits, down-sampling
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

FORMAT_NAME = "animarl-episodes"
SCHEMA_VERSION = 1

STAGES = ("estimation", "offline", "online")
OUTCOMES = ("contact", "timeout", "boundary")


class DatasetFormatError(ValueError):
    """Raised when a dataset header names another format or schema version"""


class DatasetParseError(ValueError):
    """Raised when a dataset line cannot be parsed"""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class Episode:
    """
    One recorded chase-and-escape episode

    positions and velocities have shape (T, K, 2) for T samples and K agents.
    actions has shape (T, K); actions[t, k] is the action agent k took at
    sample t, -1 where unknown (always -1 on the final sample).
    """
    episode_id: int
    condition: int
    dt: float
    roles: List[str]
    positions: np.ndarray
    velocities: np.ndarray
    actions: np.ndarray
    outcome: str
    winner_role: Optional[str]

    @property
    def n_steps(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_agents(self) -> int:
        return int(self.positions.shape[1])

    @property
    def duration(self) -> float:
        return (self.n_steps - 1) * self.dt

    @property
    def has_actions(self) -> bool:
        return bool(np.all(self.actions[:-1] >= 0)) if self.n_steps > 1 else False

    def role_indices(self, role: str) -> List[int]:
        return [k for k, r in enumerate(self.roles) if r == role]

    def start_vector(self) -> np.ndarray:
        """All-agent start positions flattened to one vector"""
        return self.positions[0].reshape(-1)

    def path_length(self, agent_index: int) -> float:
        """Arc length sum_t |p_{t+1} - p_t| travelled by one agent"""
        steps = np.diff(self.positions[:, agent_index], axis=0)
        return float(np.hypot(steps[:, 0], steps[:, 1]).sum()) if steps.size else 0.0

    def mean_path_length(self, role: str = "chaser") -> float:
        """Path length averaged over the agents of one role"""
        indices = self.role_indices(role)
        if not indices:
            raise ValueError(f"Episode {self.episode_id} has no '{role}' agents")
        return float(np.mean([self.path_length(k) for k in indices]))

    def to_dict(self) -> Dict:
        return {
            "episode_id": int(self.episode_id),
            "condition": int(self.condition),
            "dt": float(self.dt),
            "roles": list(self.roles),
            "outcome": self.outcome,
            "winner_role": self.winner_role,
            "duration": self.duration,
            "positions": self.positions.tolist(),
            "velocities": self.velocities.tolist(),
            "actions": self.actions.tolist()
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Episode":
        positions = np.asarray(data["positions"], dtype=float)
        velocities = np.asarray(data["velocities"], dtype=float)
        actions = np.asarray(data["actions"], dtype=int)
        # empty arrays lose their trailing dimensions in JSON
        if positions.size == 0:
            positions = positions.reshape(0, len(data["roles"]), 2)
            velocities = velocities.reshape(0, len(data["roles"]), 2)
            actions = actions.reshape(0, len(data["roles"]))
        return cls(
            episode_id=int(data["episode_id"]),
            condition=int(data["condition"]),
            dt=float(data["dt"]),
            roles=list(data["roles"]),
            positions=positions,
            velocities=velocities,
            actions=actions,
            outcome=data["outcome"],
            winner_role=data.get("winner_role")
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.episode_id == other.episode_id
            and self.condition == other.condition
            and self.dt == other.dt
            and self.roles == other.roles
            and self.outcome == other.outcome
            and self.winner_role == other.winner_role
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
            and np.array_equal(self.actions, other.actions)
        )


def _header_line() -> str:
    return json.dumps({"format": FORMAT_NAME, "schema_version": SCHEMA_VERSION})


def write_dataset(episodes: Sequence[Episode], path: Union[str, Path]) -> Path:
    """
    Write episodes as JSON lines, schema header on line 1

    JSON floats are written with repr(), which round-trips every double exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_header_line() + "\n")
        for episode in episodes:
            f.write(json.dumps(episode.to_dict()) + "\n")
    return path


def append_dataset(episodes: Sequence[Episode], path: Union[str, Path]) -> Path:
    """
    Append episodes to a dataset file, writing the header first if the file is new

    Raises:
        DatasetFormatError: the existing file carries another header
    """
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return write_dataset(episodes, path)
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
    if first != _header_line():
        raise DatasetFormatError(f"Cannot append to {path}: unexpected header {first!r}")
    with open(path, "a", encoding="utf-8") as f:
        for episode in episodes:
            f.write(json.dumps(episode.to_dict()) + "\n")
    return path


def read_dataset(path: Union[str, Path]) -> List[Episode]:
    """
    Read an episode file written by write_dataset

    Raises:
        DatasetFormatError: header names another format or schema version
        DatasetParseError: a line is truncated or malformed (carries the line number)
    """
    path = Path(path)
    episodes = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    if not lines:
        raise DatasetParseError(1, "missing schema header")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetParseError(1, f"invalid header: {e}")
    if header.get("format") != FORMAT_NAME or header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(
            f"Unsupported dataset header {header}; expected format={FORMAT_NAME} "
            f"schema_version={SCHEMA_VERSION}"
        )

    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            episodes.append(Episode.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetParseError(line_number, str(e))

    return episodes


def downsample(episode: Episode, stride: int) -> Episode:
    """
    Keep every stride-th sample and rescale dt (e.g. 30 Hz -> 10 Hz with stride 3)

    Velocities are recomputed from the kept positions; actions become unknown.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return episode

    positions = episode.positions[::stride].copy()
    dt = episode.dt * stride
    velocities = np.zeros_like(positions)
    if positions.shape[0] > 1:
        velocities[1:] = np.diff(positions, axis=0) / dt
    return Episode(
        episode_id=episode.episode_id,
        condition=episode.condition,
        dt=dt,
        roles=list(episode.roles),
        positions=positions,
        velocities=velocities,
        actions=np.full(positions.shape[:2], -1, dtype=int),
        outcome=episode.outcome,
        winner_role=episode.winner_role
    )


@dataclass
class StageSplit:
    """Episode ids of one pipeline stage"""
    train: List[int] = field(default_factory=list)
    validation: List[int] = field(default_factory=list)
    test: List[int] = field(default_factory=list)


@dataclass
class SplitSpec:
    """Train/validation/test ids for every pipeline stage"""
    stages: Dict[str, StageSplit]
    seed: int

    def check_isolation(self) -> None:
        """
        Test ids of every stage must be disjoint from the training and
        validation ids of that stage and of every earlier stage
        """
        seen_training = set()
        for stage in STAGES:
            if stage not in self.stages:
                continue
            split = self.stages[stage]
            seen_training |= set(split.train) | set(split.validation)
            leaked = seen_training & set(split.test)
            if leaked:
                raise ValueError(
                    f"Stage '{stage}': test ids overlap training data: {sorted(leaked)[:10]}"
                )

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "stages": {
                name: {"train": s.train, "validation": s.validation, "test": s.test}
                for name, s in self.stages.items()
            }
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SplitSpec":
        stages = {
            name: StageSplit(train=list(s["train"]), validation=list(s["validation"]), test=list(s["test"]))
            for name, s in data["stages"].items()
        }
        return cls(stages=stages, seed=int(data["seed"]))


def _per_condition(count: int, n_conditions: int) -> List[int]:
    base, extra = divmod(count, n_conditions)
    return [base + (1 if i < extra else 0) for i in range(n_conditions)]


def make_splits(
    episodes: Sequence[Episode],
    counts: Dict[str, int],
    seed: int,
    stages: Sequence[str] = STAGES
) -> SplitSpec:
    """
    Stratified train/validation/test split shared by every pipeline stage

    Counts are divided evenly across conditions (remainders go to the lower
    condition flag), so 400/50/50 over two conditions is 200/25/25 each.
    One partition serves all stages, which keeps every stage's test ids out of
    every stage's training data.

    Args:
        episodes: Dataset to split
        counts: {"train": n, "validation": n, "test": n}
        seed: Shuffle seed
        stages: Stage names to populate

    Returns:
        SplitSpec
    """
    n_train = counts.get("train", 0)
    n_val = counts.get("validation", 0)
    n_test = counts.get("test", 0)
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"Split counts must be non-negative: {counts}")
    if n_train + n_val + n_test > len(episodes):
        raise ValueError(
            f"Requested {n_train + n_val + n_test} episodes but dataset has {len(episodes)}"
        )

    conditions = sorted({ep.condition for ep in episodes})
    if not conditions:
        return SplitSpec(stages={s: StageSplit() for s in stages}, seed=seed)

    rng = np.random.default_rng(seed)
    wanted = {
        name: _per_condition(n, len(conditions))
        for name, n in (("train", n_train), ("validation", n_val), ("test", n_test))
    }

    split = StageSplit()
    for ci, condition in enumerate(conditions):
        ids = sorted(ep.episode_id for ep in episodes if ep.condition == condition)
        need = wanted["train"][ci] + wanted["validation"][ci] + wanted["test"][ci]
        if need > len(ids):
            raise ValueError(
                f"Condition {condition}: need {need} episodes, only {len(ids)} available"
            )
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        a = wanted["train"][ci]
        b = a + wanted["validation"][ci]
        c = b + wanted["test"][ci]
        split.train.extend(shuffled[:a])
        split.validation.extend(shuffled[a:b])
        split.test.extend(shuffled[b:c])

    for part in (split.train, split.validation, split.test):
        part.sort()

    spec = SplitSpec(
        stages={s: StageSplit(list(split.train), list(split.validation), list(split.test)) for s in stages},
        seed=seed
    )
    spec.check_isolation()
    return spec


def write_splits(spec: SplitSpec, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2)
    return path


def read_splits(path: Union[str, Path]) -> SplitSpec:
    """Load a split file and re-check stage isolation"""
    with open(path, "r", encoding="utf-8") as f:
        spec = SplitSpec.from_dict(json.load(f))
    spec.check_isolation()
    return spec


def select(episodes: Sequence[Episode], ids: Sequence[int]) -> List[Episode]:
    """Episodes whose ids are listed, in dataset order"""
    wanted = set(ids)
    return [ep for ep in episodes if ep.episode_id in wanted]
