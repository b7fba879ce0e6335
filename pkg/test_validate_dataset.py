#!/usr/bin/env python3
"""
Tests for dataset validation
"""

import json
from dataclasses import replace

import numpy as np

from data_io import write_dataset
from validate_dataset import DatasetValidator


def test_scripted_demos_are_valid(small_demos):
    validator = DatasetValidator(verbose=False)
    ok, issues = validator.validate_episodes(small_demos)
    assert ok and issues == []
    assert validator.report['valid_episodes'] == len(small_demos)
    assert validator.report['episodes_with_actions'] == len(small_demos)
    assert validator.generate_summary_report()


def test_broken_episodes_are_reported(small_demos):
    ep = small_demos[0]
    bad_actions = small_demos[1].actions.copy()
    bad_actions[0, 0] = 13
    broken = [
        replace(ep, condition=2),
        replace(small_demos[1], actions=bad_actions, episode_id=ep.episode_id),
    ]
    ok, issues = DatasetValidator(verbose=False).validate_episodes(broken)
    assert not ok
    assert any("condition flag" in i for i in issues)
    assert any("actions outside" in i for i in issues)
    assert any("duplicate episode id" in i for i in issues)


def test_final_action_must_be_unknown(small_demos):
    actions = small_demos[0].actions.copy()
    actions[-1] = 0
    ok, issues = DatasetValidator(verbose=False).validate_episodes([replace(small_demos[0], actions=actions)])
    assert not ok
    assert "final sample" in issues[0]


def test_positions_outside_boundary(small_demos):
    positions = small_demos[0].positions.copy()
    positions[0, 0] = [5.0, 0.0]
    issues = DatasetValidator(verbose=False).validate_episode(replace(small_demos[0], positions=positions))
    assert any("boundary" in i for i in issues)


def test_non_finite_values(small_demos):
    velocities = small_demos[0].velocities.copy()
    velocities[1, 2, 0] = np.nan
    issues = DatasetValidator(verbose=False).validate_episode(replace(small_demos[0], velocities=velocities))
    assert any("non-finite" in i for i in issues)


def test_unreadable_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format": "other", "schema_version": 1}\n')
    ok, issues = DatasetValidator(verbose=False).validate_file(path)
    assert not ok
    assert issues[0].startswith("bad.jsonl")


def test_run_writes_report(small_demos, tmp_path):
    data = write_dataset(small_demos, tmp_path / "d.jsonl")
    report = tmp_path / "report.json"
    assert DatasetValidator(verbose=False).run(data, report)
    saved = json.loads(report.read_text())
    assert saved['total_episodes'] == len(small_demos)
    assert saved['issues'] == []


def test_empty_dataset_is_not_ready(tmp_path):
    data = write_dataset([], tmp_path / "empty.jsonl")
    assert not DatasetValidator(verbose=False).run(data)


def test_durations_within_the_time_limit(small_demos, short_world):
    validator = DatasetValidator(time_limit=short_world.time_limit, verbose=False)
    ok, issues = validator.validate_episodes(small_demos)
    assert ok and issues == []


def test_episode_longer_than_the_time_limit(small_demos):
    ep = max(small_demos, key=lambda e: e.n_steps)
    issues = DatasetValidator(time_limit=(ep.n_steps - 3) * ep.dt, verbose=False).validate_episode(ep)
    assert any("exceeds the time limit" in i for i in issues)


def test_truncated_timeout(small_demos, short_world):
    ep = small_demos[0]
    keep = 4
    truncated = replace(
        ep,
        positions=ep.positions[:keep],
        velocities=ep.velocities[:keep],
        actions=np.vstack([ep.actions[:keep - 1], np.full((1, ep.n_agents), -1)]),
        outcome="timeout"
    )
    issues = DatasetValidator(time_limit=short_world.time_limit, verbose=False).validate_episode(truncated)
    assert any("timeout after" in i for i in issues)
