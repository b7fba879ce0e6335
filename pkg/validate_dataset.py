#!/usr/bin/env python3
"""
Dataset Validation for AnimaRL Episode Files
Checks episode invariants and readiness for parameter estimation and training
"""

import json
import math
from collections import defaultdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from chase_env import N_ACTIONS
from data_io import OUTCOMES, DatasetFormatError, DatasetParseError, Episode, read_dataset

DEFAULT_BOUNDARY = 1.1


class DatasetValidator:
    """Validate episode invariants across a dataset"""

    def __init__(
        self,
        boundary_half_width: float = DEFAULT_BOUNDARY,
        time_limit: Optional[float] = None,
        verbose: bool = True
    ):
        self.boundary_half_width = boundary_half_width
        self.time_limit = time_limit
        self.verbose = verbose
        self.report = {
            'total_episodes': 0,
            'valid_episodes': 0,
            'total_samples': 0,
            'episodes_with_actions': 0,
            'conditions': defaultdict(int),
            'outcomes': defaultdict(int),
            'issues': []
        }

    def validate_episode(self, episode: Episode) -> List[str]:
        """Invariant violations of a single episode"""
        issues = []
        prefix = f"Episode {episode.episode_id}"
        T, K = episode.positions.shape[:2] if episode.positions.ndim == 3 else (0, 0)

        if episode.positions.ndim != 3 or episode.positions.shape[2:] != (2,):
            issues.append(f"{prefix}: positions must have shape (T, K, 2), got {episode.positions.shape}")
            return issues
        if episode.velocities.shape != episode.positions.shape:
            issues.append(f"{prefix}: velocities shape {episode.velocities.shape} != positions shape {episode.positions.shape}")
        if episode.actions.shape != (T, K):
            issues.append(f"{prefix}: actions shape {episode.actions.shape} != ({T}, {K})")
        if len(episode.roles) != K:
            issues.append(f"{prefix}: {len(episode.roles)} roles for {K} agents")

        if not np.all(np.isfinite(episode.positions)) or not np.all(np.isfinite(episode.velocities)):
            issues.append(f"{prefix}: non-finite positions or velocities")

        if episode.dt <= 0:
            issues.append(f"{prefix}: dt must be positive, got {episode.dt}")
        if episode.condition not in (0, 1):
            issues.append(f"{prefix}: condition flag must be 0 or 1, got {episode.condition}")
        if episode.outcome not in OUTCOMES:
            issues.append(f"{prefix}: unknown outcome '{episode.outcome}'")

        if T > 1 and episode.actions.shape == (T, K):
            body = episode.actions[:-1]
            if np.any((body < -1) | (body >= N_ACTIONS)):
                issues.append(f"{prefix}: actions outside -1..{N_ACTIONS - 1}")
            if np.any(episode.actions[-1] != -1):
                issues.append(f"{prefix}: final sample must carry action -1")

        # only the final sample may sit outside the boundary
        if T > 1:
            inside = np.abs(episode.positions[:-1]) <= self.boundary_half_width + 1e-12
            if not np.all(inside):
                issues.append(f"{prefix}: positions outside the boundary before the final step")

        if self.time_limit is not None and episode.dt > 0 and T > 0:
            issues.extend(self._duration_issues(episode, prefix))

        return issues

    def _duration_issues(self, episode: Episode, prefix: str) -> List[str]:
        """Episode length against the step horizon; timeouts end exactly on it"""
        horizon = int(math.ceil(self.time_limit / episode.dt - 1e-9))
        steps = episode.n_steps - 1
        if steps > horizon:
            return [f"{prefix}: duration {episode.duration:.3f}s exceeds the time limit {self.time_limit}s"]
        if episode.outcome == "timeout" and steps != horizon:
            return [f"{prefix}: timeout after {episode.duration:.3f}s, expected {horizon * episode.dt:.3f}s"]
        return []

    def validate_episodes(self, episodes: Sequence[Episode]) -> Tuple[bool, List[str]]:
        """Validate a list of episodes and fill the report"""
        seen_ids = set()
        for ep in episodes:
            self.report['total_episodes'] += 1
            issues = self.validate_episode(ep)
            if ep.episode_id in seen_ids:
                issues.append(f"Episode {ep.episode_id}: duplicate episode id")
            seen_ids.add(ep.episode_id)

            self.report['conditions'][ep.condition] += 1
            self.report['outcomes'][ep.outcome] += 1
            self.report['total_samples'] += ep.n_steps
            if ep.has_actions:
                self.report['episodes_with_actions'] += 1
            if issues:
                self.report['issues'].extend(issues)
            else:
                self.report['valid_episodes'] += 1
        return not self.report['issues'], list(self.report['issues'])

    def validate_file(self, path: Path) -> Tuple[bool, List[str]]:
        """Read and validate one dataset file"""
        try:
            episodes = read_dataset(path)
        except (DatasetFormatError, DatasetParseError) as e:
            self.report['issues'].append(f"{Path(path).name}: {e}")
            return False, list(self.report['issues'])
        return self.validate_episodes(episodes)

    def generate_summary_report(self) -> bool:
        """Print the summary and return whether the data is ready for training"""
        total_issues = len(self.report['issues'])
        is_ready = total_issues == 0 and self.report['valid_episodes'] > 0
        if not self.verbose:
            return is_ready

        print("\n" + "=" * 60)
        print("Dataset Validation Report")
        print("=" * 60)

        print(f"\n📊 Overall Statistics:")
        print(f"  Episodes: {self.report['valid_episodes']}/{self.report['total_episodes']} valid")
        print(f"  Samples: {self.report['total_samples']:,}")
        print(f"  With actions: {self.report['episodes_with_actions']}")
        for condition, count in sorted(self.report['conditions'].items()):
            print(f"  Condition {condition + 1}: {count}")
        for outcome, count in sorted(self.report['outcomes'].items()):
            print(f"  Outcome {outcome}: {count}")

        if total_issues:
            print(f"\n⚠️  Total Issues: {total_issues}")
            print("\nSample Issues (first 10):")
            for issue in self.report['issues'][:10]:
                print(f"  - {issue}")
        else:
            print("\n✅ No validation issues found!")
        return is_ready

    def save_report(self, output_path: Path):
        """Save validation report to JSON"""
        with open(output_path, 'w', encoding='utf-8') as f:
            json.dump(self.report, f, indent=2, default=str)
        if self.verbose:
            print(f"\n💾 Full report saved to: {output_path}")

    def run(self, path: Path, report_path: Optional[Path] = None) -> bool:
        if self.verbose:
            print("=" * 60)
            print(f"Validating {path}")
            print("=" * 60)
        self.validate_file(path)
        is_ready = self.generate_summary_report()
        if report_path is not None:
            self.save_report(report_path)
        return is_ready


def main():
    """Main entry point"""
    import argparse

    parser = argparse.ArgumentParser(description="Validate an AnimaRL episode dataset")
    parser.add_argument("data", type=str, help="Dataset file (.jsonl)")
    parser.add_argument("--boundary", type=float, default=DEFAULT_BOUNDARY, help="Boundary half width")
    parser.add_argument("--time-limit", type=float, default=None, help="Episode time limit in seconds for the duration check")
    parser.add_argument("--report", type=str, default=None, help="Write the JSON report here")
    args = parser.parse_args()

    path = Path(args.data)
    if not path.exists():
        print(f"❌ Dataset not found: {path}")
        raise SystemExit(2)

    validator = DatasetValidator(boundary_half_width=args.boundary, time_limit=args.time_limit)
    is_ready = validator.run(path, Path(args.report) if args.report else None)
    if is_ready:
        print("\n✅ Dataset validation complete - ready for training")
    else:
        print("\n⚠️  Dataset validation complete - issues need attention")
        raise SystemExit(1)


if __name__ == '__main__':
    main()
