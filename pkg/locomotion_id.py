#!/usr/bin/env python3
"""
Locomotion Parameter Identification for the AnimaRL Simulator
Estimates damping d and input amplitude u from trajectories and validates the fit
"""

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from chase_env import heading_of, nearest_action, velocity_transition
from config_file import read_key_values, write_key_values
from data_io import Episode

DEFAULT_TH_ACC = 0.5
# |a_hat| below this is read as "no acceleration"
ACTION_RESIDUAL_THRESHOLD = 0.5
MIN_SAMPLES = 100


class EstimationError(ValueError):
    """Raised when the trajectories do not support a parameter estimate"""


@dataclass(frozen=True)
class LocomotionParams:
    """Fitted damping/amplitude pair with its diagnostics"""
    d: float
    u: float
    v_on: float
    v_max: float
    n_transitions: int
    th_acc: float = DEFAULT_TH_ACC
    rmse: Optional[float] = None

    @property
    def d_exceeds_one(self) -> bool:
        """Diagnostic: onset speed above the top-speed median"""
        return self.d > 1.0


@dataclass
class Trajectory:
    """Velocity history of one agent in one episode"""
    episode_id: int
    agent_index: int
    velocities: np.ndarray
    actions: Optional[np.ndarray] = None

    @property
    def speeds(self) -> np.ndarray:
        return np.hypot(self.velocities[:, 0], self.velocities[:, 1])


@dataclass
class TrajectoryBatch:
    """Trajectories of one agent role sampled at a common interval"""
    trajectories: List[Trajectory]
    dt: float
    role: str = "any"

    @classmethod
    def from_episodes(
        cls,
        episodes: Sequence[Episode],
        role: str,
        verbose: bool = False
    ) -> "TrajectoryBatch":
        """
        Collect every agent of one role from a set of episodes

        Episodes shorter than 3 samples are skipped with a warning.
        """
        if not episodes:
            raise ValueError("No episodes given")
        dts = {ep.dt for ep in episodes}
        if len(dts) != 1:
            raise ValueError(f"Episodes use different sampling intervals: {sorted(dts)}")

        trajectories = []
        skipped = 0
        iterator = tqdm(episodes, desc=f"Collecting {role} trajectories") if verbose else episodes
        for ep in iterator:
            if ep.n_steps < 3:
                skipped += 1
                continue
            for k in ep.role_indices(role):
                actions = ep.actions[:-1, k] if ep.has_actions else None
                trajectories.append(Trajectory(
                    episode_id=ep.episode_id,
                    agent_index=k,
                    velocities=np.asarray(ep.velocities[:, k], dtype=float),
                    actions=actions
                ))

        if skipped and verbose:
            print(f"⚠️  Skipped {skipped} episodes shorter than 3 samples")
        return cls(trajectories=trajectories, dt=dts.pop(), role=role)

    @property
    def has_actions(self) -> bool:
        return all(tr.actions is not None for tr in self.trajectories)


def _lower_median(values: Sequence[float]) -> float:
    ordered = np.sort(np.asarray(values, dtype=float))
    return float(ordered[(ordered.size - 1) // 2])


def detect_onsets(speeds: Sequence[float], th_acc: float, dt: float) -> List[int]:
    """
    Rest-to-motion transitions: t with |v|_t < th_acc*dt <= |v|_{t+1}

    Args:
        speeds: Speed history
        th_acc: Acceleration threshold (> 0)
        dt: Sampling interval

    Returns:
        Sorted list of onset indices (empty for sequences shorter than 2)
    """
    if th_acc <= 0:
        raise ValueError(f"th_acc must be positive, got {th_acc}")
    speeds = np.asarray(speeds, dtype=float)
    if speeds.size < 2:
        return []
    eps = th_acc * dt
    hits = (speeds[:-1] < eps) & (speeds[1:] >= eps)
    return [int(i) for i in np.flatnonzero(hits)]


def estimate(batch: TrajectoryBatch, th_acc: float = DEFAULT_TH_ACC) -> LocomotionParams:
    """
    Estimate d and u from onset speeds and the top-percentile speeds

        v_on  = median of |v|_{t+1} over onsets
        v_max = median of speeds at or above the pooled 99th percentile
        u = v_on / dt,  d = v_on / v_max

    Medians are lower medians. d > 1 is reported, not clamped.
    """
    onset_speeds = []
    pooled = []
    for traj in batch.trajectories:
        speeds = traj.speeds
        pooled.append(speeds)
        onset_speeds.extend(speeds[i + 1] for i in detect_onsets(speeds, th_acc, batch.dt))

    if not onset_speeds:
        raise EstimationError(
            f"No rest-to-motion transitions found with th_acc={th_acc} "
            f"(speed threshold {th_acc * batch.dt:g})"
        )

    pooled = np.concatenate(pooled) if pooled else np.zeros(0)
    if pooled.size < MIN_SAMPLES:
        raise EstimationError(
            f"Need at least {MIN_SAMPLES} speed samples for the 99th percentile, got {pooled.size}"
        )

    p99 = float(np.percentile(pooled, 99))
    top = pooled[pooled >= p99]
    if top.size == 0:
        raise EstimationError("Top-percentile speed set is empty")

    v_on = _lower_median(onset_speeds)
    v_max = _lower_median(top)
    if v_max <= 0:
        raise EstimationError("Top speeds are zero; agents never move")

    return LocomotionParams(
        d=v_on / v_max,
        u=v_on / batch.dt,
        v_on=v_on,
        v_max=v_max,
        n_transitions=len(onset_speeds),
        th_acc=th_acc
    )


def infer_actions(batch: TrajectoryBatch, params: LocomotionParams) -> List[np.ndarray]:
    """
    Recover discrete actions from consecutive velocities

    a_hat = (v_{t+1} - (1 - d) v_t) / (u dt); index 0 when |a_hat| < 0.5,
    otherwise the nearest local-frame direction (ties go to the lower index).
    """
    if params.u == 0:
        raise ValueError("Cannot infer actions with u = 0")

    inferred = []
    for traj in batch.trajectories:
        v = traj.velocities
        a_hat = (v[1:] - (1.0 - params.d) * v[:-1]) / (params.u * batch.dt)
        actions = np.zeros(len(a_hat), dtype=int)
        for t, a in enumerate(a_hat):
            if float(np.hypot(a[0], a[1])) >= ACTION_RESIDUAL_THRESHOLD:
                actions[t] = nearest_action(a, heading_of(v[t]))
        inferred.append(actions)
    return inferred


def validate(
    params: LocomotionParams,
    batch: TrajectoryBatch,
    actions: Optional[Sequence[np.ndarray]] = None
) -> float:
    """
    One-step velocity prediction RMSE, sqrt(mean |v'_pred - v'_obs|^2)

    Args:
        params: Parameters to check
        batch: Observed trajectories
        actions: Per-trajectory action arrays (length T-1); defaults to the
            recorded actions of the batch

    Returns:
        RMSE in length per second
    """
    if actions is None:
        if not batch.has_actions:
            raise ValueError("Batch has no recorded actions; pass actions explicitly")
        actions = [traj.actions for traj in batch.trajectories]
    if len(actions) != len(batch.trajectories):
        raise ValueError(
            f"Got actions for {len(actions)} trajectories, batch has {len(batch.trajectories)}"
        )

    squared = 0.0
    count = 0
    for traj, acts in zip(batch.trajectories, actions):
        v = traj.velocities
        if len(acts) != len(v) - 1:
            raise ValueError(
                f"Episode {traj.episode_id} agent {traj.agent_index}: "
                f"{len(acts)} actions for {len(v)} samples"
            )
        for t, a in enumerate(acts):
            predicted = velocity_transition(v[t], int(a), params, heading_of(v[t]), batch.dt)
            squared += float(np.sum((predicted - v[t + 1]) ** 2))
            count += 1

    if count == 0:
        raise ValueError("No transitions to validate")
    return math.sqrt(squared / count)


def fit_role(
    episodes: Sequence[Episode],
    role: str,
    th_acc: float = DEFAULT_TH_ACC,
    verbose: bool = False
) -> LocomotionParams:
    """Estimate one role's parameters and attach the validation RMSE"""
    batch = TrajectoryBatch.from_episodes(episodes, role, verbose=verbose)
    params = estimate(batch, th_acc)
    actions = None if batch.has_actions else infer_actions(batch, params)
    return replace(params, rmse=validate(params, batch, actions))


def label_actions(
    episodes: Sequence[Episode],
    params_by_role: Dict[str, LocomotionParams]
) -> List[Episode]:
    """Copies of the episodes with every missing action filled in by infer_actions"""
    labelled = []
    for ep in episodes:
        if ep.has_actions or ep.n_steps < 2:
            labelled.append(ep)
            continue
        actions = np.full(ep.actions.shape, -1, dtype=int)
        for k, role in enumerate(ep.roles):
            if role not in params_by_role:
                raise ValueError(f"No locomotion parameters for role '{role}'")
            batch = TrajectoryBatch(
                trajectories=[Trajectory(ep.episode_id, k, np.asarray(ep.velocities[:, k], dtype=float))],
                dt=ep.dt,
                role=role
            )
            actions[:-1, k] = infer_actions(batch, params_by_role[role])[0]
        labelled.append(replace(ep, actions=actions))
    return labelled


def write_parameter_report(
    path: Union[str, Path],
    results: Dict[str, LocomotionParams],
    ground_truth: Optional[Dict[str, Dict[str, float]]] = None
) -> Path:
    """
    Write a per-role parameter report (d, u, velocity RMSE, diagnostics)

    Args:
        path: Output file
        results: Role name -> fitted parameters
        ground_truth: Optional role name -> {"d": ..., "u": ...}
    """
    values = {}
    for role in sorted(results):
        p = results[role]
        prefix = role.upper()
        values[f"{prefix}_D"] = p.d
        values[f"{prefix}_U"] = p.u
        values[f"{prefix}_RMSE"] = p.rmse if p.rmse is not None else float("nan")
        values[f"{prefix}_V_ON"] = p.v_on
        values[f"{prefix}_V_MAX"] = p.v_max
        values[f"{prefix}_N_TRANSITIONS"] = p.n_transitions
        values[f"{prefix}_D_EXCEEDS_ONE"] = p.d_exceeds_one
        if ground_truth and role in ground_truth:
            values[f"{prefix}_D_TRUE"] = float(ground_truth[role]["d"])
            values[f"{prefix}_U_TRUE"] = float(ground_truth[role]["u"])
    if results:
        values["TH_ACC"] = next(iter(results.values())).th_acc

    return write_key_values(
        path,
        values,
        header="Locomotion parameter estimates: damping d, input amplitude u, velocity RMSE per role"
    )


def read_parameter_report(path: Union[str, Path]) -> Dict[str, Dict[str, str]]:
    """Parse a parameter report back into role -> {field: raw value}"""
    report: Dict[str, Dict[str, str]] = {}
    for key, value in read_key_values(path).items():
        if key == "th_acc":
            continue
        role, _, name = key.partition("_")
        report.setdefault(role, {})[name] = value
    return report
