#!/usr/bin/env python3
"""
Tests for episode dataset I/O
File format, parse errors, stratified splits and down-sampling
"""

import json

import numpy as np
import pytest

from data_io import (
    FORMAT_NAME,
    SCHEMA_VERSION,
    STAGES,
    DatasetFormatError,
    DatasetParseError,
    Episode,
    append_dataset,
    downsample,
    make_splits,
    read_dataset,
    read_splits,
    select,
    write_dataset,
    write_splits,
)


def tiny_episode(episode_id: int, condition: int = 0, n_steps: int = 2) -> Episode:
    positions = np.arange(n_steps * 3 * 2, dtype=float).reshape(n_steps, 3, 2) / 10
    actions = np.full((n_steps, 3), -1, dtype=int)
    actions[:-1] = 1
    return Episode(
        episode_id=episode_id,
        condition=condition,
        dt=0.1,
        roles=["chaser", "chaser", "evader"],
        positions=positions,
        velocities=np.ones_like(positions) * 0.3,
        actions=actions,
        outcome="timeout",
        winner_role="evader"
    )


def balanced(n: int):
    return [tiny_episode(i, condition=i % 2) for i in range(n)]


class TestDatasetFile:

    def test_two_step_file_layout(self, tmp_path):
        path = write_dataset([tiny_episode(7, condition=1)], tmp_path / "d.jsonl")
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0]) == {"format": FORMAT_NAME, "schema_version": SCHEMA_VERSION}
        record = json.loads(lines[1])
        assert record["episode_id"] == 7
        assert record["condition"] == 1
        assert record["duration"] == 0.1
        assert record["positions"][1][2] == [1.0, 1.1]
        assert record["actions"] == [[1, 1, 1], [-1, -1, -1]]

    def test_round_trip_is_exact(self, tmp_path, small_demos):
        path = write_dataset(small_demos, tmp_path / "d.jsonl")
        assert read_dataset(path) == small_demos

    def test_empty_dataset_is_header_only(self, tmp_path):
        path = write_dataset([], tmp_path / "empty.jsonl")
        assert len(path.read_text().splitlines()) == 1
        assert read_dataset(path) == []

    def test_rewriting_is_byte_identical(self, tmp_path, small_demos):
        a = write_dataset(small_demos, tmp_path / "a.jsonl")
        b = write_dataset(read_dataset(a), tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_concatenated_files_stay_valid(self, tmp_path, small_demos):
        first = write_dataset(small_demos[:3], tmp_path / "a.jsonl")
        second = write_dataset(small_demos[3:], tmp_path / "b.jsonl")
        joined = tmp_path / "joined.jsonl"
        body = second.read_text().splitlines(keepends=True)[1:]
        joined.write_text(first.read_text() + "".join(body))
        assert read_dataset(joined) == small_demos
        assert joined.read_bytes() == write_dataset(small_demos, tmp_path / "all.jsonl").read_bytes()

    def test_append_matches_a_single_write(self, tmp_path, small_demos):
        path = tmp_path / "appended.jsonl"
        append_dataset(small_demos[:5], path)
        append_dataset(small_demos[5:], path)
        assert path.read_bytes() == write_dataset(small_demos, tmp_path / "all.jsonl").read_bytes()

    def test_append_refuses_a_foreign_header(self, tmp_path, small_demos):
        path = tmp_path / "other.jsonl"
        path.write_text(json.dumps({"format": "other", "schema_version": 1}) + "\n")
        with pytest.raises(DatasetFormatError):
            append_dataset(small_demos, path)

    def test_wrong_schema_version(self, tmp_path):
        path = tmp_path / "v2.jsonl"
        path.write_text(json.dumps({"format": FORMAT_NAME, "schema_version": 2}) + "\n")
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_truncated_line_reports_line_number(self, tmp_path):
        path = write_dataset([tiny_episode(0), tiny_episode(1)], tmp_path / "d.jsonl")
        text = path.read_text()
        path.write_text(text[:-40])
        with pytest.raises(DatasetParseError) as info:
            read_dataset(path)
        assert info.value.line_number == 3
        assert "line 3" in str(info.value)

    def test_missing_field(self, tmp_path):
        path = write_dataset([tiny_episode(0)], tmp_path / "d.jsonl")
        header, line = path.read_text().splitlines()
        record = json.loads(line)
        del record["positions"]
        path.write_text(header + "\n" + json.dumps(record) + "\n")
        with pytest.raises(DatasetParseError):
            read_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "blank.jsonl"
        path.write_text("")
        with pytest.raises(DatasetParseError):
            read_dataset(path)


class TestSplits:

    def test_stratified_counts(self):
        episodes = balanced(500)
        spec = make_splits(episodes, {"train": 400, "validation": 50, "test": 50}, seed=0)
        by_id = {ep.episode_id: ep.condition for ep in episodes}
        split = spec.stages["offline"]
        for part, n in ((split.train, 200), (split.validation, 25), (split.test, 25)):
            conditions = [by_id[i] for i in part]
            assert conditions.count(0) == n and conditions.count(1) == n

    def test_every_stage_shares_one_partition(self):
        spec = make_splits(balanced(40), {"train": 20, "validation": 10, "test": 10}, seed=1)
        assert set(spec.stages) == set(STAGES)
        tests = {s: tuple(spec.stages[s].test) for s in STAGES}
        assert len(set(tests.values())) == 1
        trained = set(spec.stages["estimation"].train) | set(spec.stages["offline"].validation)
        assert trained.isdisjoint(spec.stages["online"].test)

    def test_deterministic_in_seed(self):
        counts = {"train": 10, "validation": 4, "test": 4}
        a = make_splits(balanced(30), counts, seed=3)
        b = make_splits(balanced(30), counts, seed=3)
        c = make_splits(balanced(30), counts, seed=4)
        assert a.to_dict() == b.to_dict()
        assert a.to_dict() != c.to_dict()

    def test_test_only_split(self):
        spec = make_splits(balanced(12), {"train": 0, "validation": 0, "test": 12}, seed=0)
        assert spec.stages["online"].test == list(range(12))
        assert spec.stages["online"].train == []

    def test_too_many_requested(self):
        with pytest.raises(ValueError):
            make_splits(balanced(10), {"train": 8, "validation": 2, "test": 2}, seed=0)

    def test_uneven_condition_counts(self):
        episodes = [tiny_episode(i, condition=0) for i in range(8)] + [tiny_episode(8 + i, condition=1) for i in range(2)]
        with pytest.raises(ValueError):
            make_splits(episodes, {"train": 8, "validation": 0, "test": 0}, seed=0)

    def test_leaked_split_file_is_rejected(self, tmp_path):
        spec = make_splits(balanced(20), {"train": 10, "validation": 4, "test": 4}, seed=0)
        path = write_splits(spec, tmp_path / "s.json")
        data = json.loads(path.read_text())
        data["stages"]["online"]["test"].append(data["stages"]["estimation"]["train"][0])
        path.write_text(json.dumps(data))
        with pytest.raises(ValueError):
            read_splits(path)

    def test_split_file_round_trip(self, tmp_path):
        spec = make_splits(balanced(20), {"train": 10, "validation": 4, "test": 4}, seed=2)
        assert read_splits(write_splits(spec, tmp_path / "s.json")).to_dict() == spec.to_dict()

    def test_select_keeps_dataset_order(self):
        episodes = balanced(6)
        assert [ep.episode_id for ep in select(episodes, [4, 1, 99])] == [1, 4]


class TestDownsample:

    def test_thirty_to_ten_hertz(self):
        ep = tiny_episode(0, n_steps=10)
        ep.dt = 1 / 30
        small = downsample(ep, 3)
        assert small.n_steps == 4
        assert small.dt == pytest.approx(0.1)
        assert np.array_equal(small.positions, ep.positions[::3])
        assert np.allclose(small.velocities[1], (ep.positions[3] - ep.positions[0]) / 0.1)
        assert not small.has_actions

    def test_stride_one_is_identity(self):
        ep = tiny_episode(0)
        assert downsample(ep, 1) is ep

    def test_invalid_stride(self):
        with pytest.raises(ValueError):
            downsample(tiny_episode(0), 0)


class TestEpisode:

    def test_duration_and_counts(self):
        ep = tiny_episode(0, n_steps=5)
        assert ep.duration == pytest.approx(0.4)
        assert ep.n_agents == 3
        assert ep.role_indices("chaser") == [0, 1]
        assert ep.has_actions

    def test_single_sample_has_no_actions(self):
        assert not tiny_episode(0, n_steps=1).has_actions

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            tiny_episode(0).mean_path_length("bystander")
