#!/usr/bin/env python3
"""
Policy Evaluator for the AnimaRL Simulator
Rolls out trained policies against ground-truth demonstrations and summarizes the statistics
"""

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from chase_env import CHASER, WorldConfig
from data_io import Episode
from dtw_reward import match_expert
from eval_stats import (
    DEFAULT_REPLICATES,
    KDE_REPLICATES,
    BootstrapResult,
    DegenerateSampleError,
    EpisodeMetrics,
    bootstrap_anova,
    compute_metrics,
    condition_gt_error,
    counterfactual_shift,
    follow_up_contrasts,
    kde_gap_bootstrap,
    paired_bootstrap,
    write_bootstrap_csv,
    write_metrics_csv,
    write_violin_csv,
)
from training import Policy, rollout


class PolicyEvaluator:
    """Evaluate policies (or recorded episodes) against a GT demonstration set"""

    def __init__(
        self,
        config: WorldConfig,
        gt_episodes: Sequence[Episode],
        n_episodes: int = 50,
        seed: int = 0,
        eps: float = 0.1,
        n_rep: int = DEFAULT_REPLICATES,
        kde_rep: int = KDE_REPLICATES,
        verbose: bool = True
    ):
        """
        Initialize evaluator

        Args:
            config: World configuration used for rollouts
            gt_episodes: Ground-truth (test) demonstrations
            n_episodes: Rollouts per condition
            seed: Seed for rollouts and bootstraps
            eps: Test-phase exploration probability
            n_rep: Bootstrap replicates
            kde_rep: Bootstrap replicates of the KDE gaps
            verbose: Print progress and the summary
        """
        if not gt_episodes:
            raise ValueError("PolicyEvaluator needs at least one GT episode")
        self.config = config
        self.gt_episodes = list(gt_episodes)
        self.n_episodes = n_episodes
        self.seed = seed
        self.eps = eps
        self.n_rep = n_rep
        self.kde_rep = kde_rep
        self.verbose = verbose

        self.metrics: Dict[str, List[EpisodeMetrics]] = {}
        # chaser path length of the nearest-start GT episode, aligned with metrics
        self.matched_gt: Dict[str, List[float]] = {}
        self.results: List[BootstrapResult] = []
        self.summary: Dict[str, Dict] = {}

    @property
    def conditions(self) -> List[int]:
        return sorted({ep.condition for ep in self.gt_episodes})

    def _gt_of(self, condition: int) -> List[Episode]:
        return [ep for ep in self.gt_episodes if ep.condition == condition]

    def rollout_policy(self, team: Dict[int, Policy], condition: int) -> List[Episode]:
        return rollout(
            team, self.config, self.eps, self.n_episodes, condition, self.seed,
            evader_pool=self._gt_of(condition)
        )

    def evaluate_episodes(self, label: str, episodes_by_condition: Dict[int, Sequence[Episode]]) -> Dict:
        """
        Metrics and bootstrap summaries for one method's episodes

        Args:
            label: Method name used in the reports
            episodes_by_condition: Condition flag -> episodes to score

        Returns:
            Summary dictionary per condition
        """
        summary = {}
        all_metrics = []
        all_matched = []
        for condition, episodes in sorted(episodes_by_condition.items()):
            gt = self._gt_of(condition) or self.gt_episodes
            metrics = compute_metrics(episodes, gt)
            all_metrics.extend(metrics)
            tag = f"{label}:condition{condition + 1}"

            lengths = np.array([m.path_length for m in metrics])
            matched = np.array([match_expert(ep.positions[0], gt).mean_path_length(CHASER) for ep in episodes])
            all_matched.extend(matched.tolist())
            dtw = np.array([m.dtw_to_gt for m in metrics])
            distributions = {
                "path_length": (lengths, [g.mean_path_length(CHASER) for g in gt]),
                "duration": ([m.duration for m in metrics], [g.duration for g in gt])
            }

            entry = {
                "episodes": len(metrics),
                "contact_rate": float(np.mean([m.episode_return for m in metrics])),
                "mean_path_length": float(lengths.mean()),
                "mean_duration": float(np.mean([m.duration for m in metrics]))
            }

            if len(metrics) >= 2:
                dtw_ci = paired_bootstrap(dtw, self.n_rep, self.seed, f"dtw_to_gt:{tag}")
                gt_error = condition_gt_error(lengths, matched, self.n_rep, self.seed, f"gt_error:{tag}")
                self.results.extend([dtw_ci, gt_error])
                entry["dtw_to_gt"] = dtw_ci
                entry["gt_error"] = gt_error

            entry["kde_gap"] = {}
            for metric, (values, gt_values) in distributions.items():
                try:
                    gap = kde_gap_bootstrap(values, gt_values, self.kde_rep, self.seed, f"kde_gap:{metric}:{tag}")
                except DegenerateSampleError as e:
                    entry["kde_gap"][metric] = None
                    if self.verbose:
                        print(f"⚠️  KDE gap ({metric}) skipped for {tag}: {e}")
                    continue
                self.results.append(gap)
                entry["kde_gap"][metric] = gap

            summary[condition] = entry

        self.metrics[label] = all_metrics
        self.matched_gt[label] = all_matched
        self.summary[label] = summary
        return summary

    def evaluate_policy(self, label: str, team: Dict[int, Policy]) -> Dict:
        if self.verbose:
            print(f"🚀 Rolling out '{label}' ({self.n_episodes} episodes per condition)")
        episodes = {c: self.rollout_policy(team, c) for c in self.conditions}
        return self.evaluate_episodes(label, episodes)

    def counterfactual(
        self,
        label: str,
        team: Dict[int, Policy],
        condition_from: int,
        condition_to: int
    ) -> BootstrapResult:
        """Paired path-length shift when the condition cue is flipped"""
        result, _ = counterfactual_shift(
            team, self.config, condition_from, condition_to, self.n_episodes, self.seed,
            eps=self.eps, n_rep=self.n_rep, evader_pool=self._gt_of(condition_from) or None
        )
        result.statistic_name = f"{result.statistic_name}:{label}"
        self.results.append(result)
        return result

    def compare_methods(self, allow_list: Sequence[Tuple[str, str]] = ()) -> List[BootstrapResult]:
        """Bootstrap ANOVA over absolute GT path-length gaps, then allowed follow-up contrasts"""
        groups = {}
        for label, metrics in self.metrics.items():
            gaps = []
            for m in metrics:
                gt = self._gt_of(m.condition) or self.gt_episodes
                gaps.append(abs(m.path_length - float(np.mean([g.mean_path_length(CHASER) for g in gt]))))
            groups[label] = gaps
        if len(groups) < 2:
            return []

        anova = bootstrap_anova(list(groups.values()), self.n_rep, self.seed, "anova_f:abs_gt_gap")
        contrasts = follow_up_contrasts(groups, allow_list, anova, self.n_rep, self.seed)
        self.results.append(anova)
        self.results.extend(contrasts)
        return [anova] + contrasts

    def paired_comparison(self, baseline: str, candidate: str) -> List[BootstrapResult]:
        """
        Paired bootstrap of baseline minus candidate on matched evaluation seeds

        Both methods must have been rolled out with this evaluator, so episode k
        of either method starts from the same state. Positive medians favour the
        candidate: it lands closer to GT by DTW and by absolute path-length gap.

        Raises:
            ValueError: a label is unknown or the episodes are not paired
        """
        for label in (baseline, candidate):
            if label not in self.metrics:
                raise ValueError(f"No evaluated episodes for '{label}'")
        first, second = self.metrics[baseline], self.metrics[candidate]
        keys_first = [(m.condition, m.episode_id) for m in first]
        keys_second = [(m.condition, m.episode_id) for m in second]
        if keys_first != keys_second:
            raise ValueError(f"Episodes of '{baseline}' and '{candidate}' are not paired")

        gaps_first = np.abs(np.array([m.path_length for m in first]) - np.asarray(self.matched_gt[baseline]))
        gaps_second = np.abs(np.array([m.path_length for m in second]) - np.asarray(self.matched_gt[candidate]))
        dtw_diffs = np.array([a.dtw_to_gt - b.dtw_to_gt for a, b in zip(first, second)])

        tag = f"{baseline}-{candidate}"
        results = [
            paired_bootstrap(dtw_diffs, self.n_rep, self.seed, f"paired:dtw_to_gt:{tag}"),
            paired_bootstrap(gaps_first - gaps_second, self.n_rep, self.seed, f"paired:abs_gt_gap:{tag}")
        ]
        self.results.extend(results)
        return results

    def write_reports(self, out_dir: Path) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "bootstrap": write_bootstrap_csv(self.results, out_dir / "bootstrap.csv"),
            "violin": write_violin_csv(self.metrics, out_dir / "violin.csv")
        }
        for label, metrics in self.metrics.items():
            paths[f"metrics:{label}"] = write_metrics_csv(metrics, out_dir / f"metrics_{label}.csv", method=label)
        if self.verbose:
            print(f"💾 Reports saved to {out_dir}")
        return paths

    def print_summary(self):
        print(f"\n{'='*60}")
        print("EVALUATION SUMMARY")
        print(f"{'='*60}")
        for label, per_condition in self.summary.items():
            for condition, entry in per_condition.items():
                print(f"\n📊 {label} / condition {condition + 1} ({entry['episodes']} episodes)")
                print(f"   Contact rate: {entry['contact_rate']:.3f}")
                print(f"   Mean chaser path length: {entry['mean_path_length']:.3f}")
                print(f"   Mean duration: {entry['mean_duration']:.2f} s")
                if "dtw_to_gt" in entry:
                    r = entry["dtw_to_gt"]
                    print(f"   DTW to GT: {r.median:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]")
                for metric, r in entry["kde_gap"].items():
                    if r is not None:
                        print(f"   KDE gap ({metric}): {r.median:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]")
        for r in self.results:
            if r.statistic_name.startswith(("counterfactual_shift", "anova_f", "contrast", "paired")):
                marker = "✅" if r.excludes_zero else "⚠️ "
                print(f"\n{marker} {r.statistic_name}: {r.median:.4f} [{r.ci_low:.4f}, {r.ci_high:.4f}]")
        print(f"{'='*60}")
