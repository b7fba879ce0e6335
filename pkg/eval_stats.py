#!/usr/bin/env python3
"""
Evaluation Statistics for the AnimaRL Simulator
Episode metrics, KDE distribution gaps, paired bootstrap, bootstrap ANOVA, counterfactual shifts
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde

from chase_env import CHASER, WorldConfig
from data_io import Episode
from dtw_reward import dtw_full, match_expert, state_features
from training import Policy, rollout

DEFAULT_REPLICATES = 10_000
# each KDE replicate refits two densities
KDE_REPLICATES = 1_000
KDE_GRID_POINTS = 512
KDE_PAD_BANDWIDTHS = 3.0
# bounds memory use of the resample index matrix
BOOTSTRAP_CHUNK = 10_000

REPORT_HEADER = (
    "kde_gap convention: L1 distance between Gaussian KDE curves (Silverman bandwidth), trapezoidal rule\n"
    "alternative conventions not implemented: L2, Jensen-Shannon\n"
    "bootstrap intervals: percentile 2.5/50/97.5"
)


class DegenerateSampleError(ValueError):
    """Raised when a sample cannot support a density estimate"""


@dataclass
class EpisodeMetrics:
    episode_id: int
    condition: int
    episode_return: int
    path_length: float
    duration: float
    dtw_to_gt: float
    outcome: str


@dataclass
class BootstrapResult:
    """Percentile bootstrap summary of one statistic"""
    statistic_name: str
    median: float
    ci_low: float
    ci_high: float
    n_replicates: int
    n: int
    seed: int

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


def compute_metrics(
    episodes: Sequence[Episode],
    gt_pool: Optional[Sequence[Episode]] = None
) -> List[EpisodeMetrics]:
    """
    Per-episode return, chaser path length, duration and DTW distance to GT

    The GT episode is the nearest-start member of gt_pool in the same
    condition (any condition when none match); dtw_to_gt is NaN without a pool.
    """
    if not episodes:
        raise ValueError("compute_metrics needs at least one episode")

    metrics = []
    for ep in episodes:
        dtw = math.nan
        if gt_pool:
            same = [g for g in gt_pool if g.condition == ep.condition] or list(gt_pool)
            gt = match_expert(ep.positions[0], same)
            dtw = dtw_full(state_features(ep.positions), state_features(gt.positions)).distance
        metrics.append(EpisodeMetrics(
            episode_id=ep.episode_id,
            condition=ep.condition,
            episode_return=int(ep.outcome == "contact"),
            path_length=ep.mean_path_length(CHASER),
            duration=ep.duration,
            dtw_to_gt=dtw,
            outcome=ep.outcome
        ))
    return metrics


def _check_sample(sample: np.ndarray, name: str) -> np.ndarray:
    sample = np.asarray(sample, dtype=float).ravel()
    if sample.size < 2:
        raise DegenerateSampleError(f"{name} needs at least 2 values, got {sample.size}")
    if not np.all(np.isfinite(sample)):
        raise DegenerateSampleError(f"{name} contains non-finite values")
    if np.ptp(sample) == 0:
        raise DegenerateSampleError(f"{name} has zero variance")
    return sample


def kde_gap(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """
    L1 distance between Gaussian KDEs of two samples

    Both densities are evaluated on a shared 512-point grid spanning the
    pooled range padded by 3 pooled bandwidths (the larger of the two).
    """
    a = _check_sample(sample_a, "sample_a")
    b = _check_sample(sample_b, "sample_b")
    kde_a = gaussian_kde(a, bw_method="silverman")
    kde_b = gaussian_kde(b, bw_method="silverman")
    bandwidth = max(math.sqrt(kde_a.covariance[0, 0]), math.sqrt(kde_b.covariance[0, 0]))

    low = min(a.min(), b.min()) - KDE_PAD_BANDWIDTHS * bandwidth
    high = max(a.max(), b.max()) + KDE_PAD_BANDWIDTHS * bandwidth
    grid = np.linspace(low, high, KDE_GRID_POINTS)
    return float(trapezoid(np.abs(kde_a(grid) - kde_b(grid)), grid))


def _resampled_means(values: np.ndarray, n_rep: int, rng: np.random.Generator) -> np.ndarray:
    n = values.size
    means = np.empty(n_rep)
    for start in range(0, n_rep, BOOTSTRAP_CHUNK):
        stop = min(start + BOOTSTRAP_CHUNK, n_rep)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = values[idx].mean(axis=1)
    return means


def _summarize(name: str, replicates: np.ndarray, n: int, seed: int, method: str = "linear") -> BootstrapResult:
    low, median, high = np.percentile(replicates, [2.5, 50.0, 97.5], method=method)
    return BootstrapResult(
        statistic_name=name,
        median=float(median),
        ci_low=float(low),
        ci_high=float(high),
        n_replicates=int(replicates.size),
        n=n,
        seed=seed
    )


def kde_gap_bootstrap(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    n_rep: int = KDE_REPLICATES,
    seed: int = 0,
    statistic_name: str = "kde_gap"
) -> BootstrapResult:
    """
    Percentile bootstrap of kde_gap, resampling each sample within itself

    Replicates whose resample has zero variance are dropped; n_replicates
    counts the ones kept.

    Raises:
        DegenerateSampleError: an input sample is degenerate or no replicate survives
    """
    a = _check_sample(sample_a, "sample_a")
    b = _check_sample(sample_b, "sample_b")
    if n_rep < 1:
        raise ValueError(f"n_rep must be >= 1, got {n_rep}")
    rng = np.random.default_rng(seed)
    replicates = []
    for _ in range(n_rep):
        ra = a[rng.integers(0, a.size, size=a.size)]
        rb = b[rng.integers(0, b.size, size=b.size)]
        if np.ptp(ra) == 0 or np.ptp(rb) == 0:
            continue
        replicates.append(kde_gap(ra, rb))
    if not replicates:
        raise DegenerateSampleError(f"{statistic_name}: every resample had zero variance")
    return _summarize(statistic_name, np.asarray(replicates), a.size + b.size, seed)


def paired_bootstrap(
    diffs: Sequence[float],
    n_rep: int = DEFAULT_REPLICATES,
    seed: int = 0,
    statistic_name: str = "mean_diff"
) -> BootstrapResult:
    """
    Percentile bootstrap of the mean of per-episode paired differences

    Args:
        diffs: Paired differences, one per episode
        n_rep: Number of replicates
        seed: Generator seed (results are bit-identical for equal seeds)
        statistic_name: Label stored in the result

    Returns:
        BootstrapResult with the 2.5/50/97.5 percentiles
    """
    diffs = np.asarray(diffs, dtype=float).ravel()
    if diffs.size < 2:
        raise ValueError(f"paired_bootstrap needs at least 2 differences, got {diffs.size}")
    if n_rep < 1:
        raise ValueError(f"n_rep must be >= 1, got {n_rep}")
    rng = np.random.default_rng(seed)
    return _summarize(statistic_name, _resampled_means(diffs, n_rep, rng), diffs.size, seed)


def anova_f(groups: Sequence[Sequence[float]]) -> float:
    """
    Classical one-way ANOVA F = MS_between / MS_within

    Zero within-group variance gives inf (or 0 when the group means agree too).
    """
    groups = [np.asarray(g, dtype=float) for g in groups]
    k = len(groups)
    n_total = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    ms_between = ss_between / (k - 1)
    ms_within = ss_within / (n_total - k)
    if ms_within == 0:
        return math.inf if ms_between > 0 else 0.0
    return float(ms_between / ms_within)


def _check_groups(groups: Sequence[Sequence[float]]) -> List[np.ndarray]:
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError(f"ANOVA needs at least 2 groups, got {len(groups)}")
    small = [i for i, g in enumerate(groups) if g.size < 2]
    if small:
        raise ValueError(f"Every ANOVA group needs at least 2 values; groups {small} are smaller")
    if all(np.ptp(g) == 0 for g in groups):
        raise ValueError("All ANOVA groups have zero variance")
    return groups


def bootstrap_anova(
    groups: Sequence[Sequence[float]],
    n_rep: int = DEFAULT_REPLICATES,
    seed: int = 0,
    statistic_name: str = "anova_f"
) -> BootstrapResult:
    """
    Bootstrap distribution of the one-way F statistic

    Each replicate resamples every group within itself. Percentiles use the
    inverted-CDF rule so replicates with F = inf do not produce NaN.
    """
    groups = _check_groups(groups)
    rng = np.random.default_rng(seed)
    replicates = np.empty(n_rep)
    for r in range(n_rep):
        resampled = [g[rng.integers(0, g.size, size=g.size)] for g in groups]
        replicates[r] = anova_f(resampled)
    return _summarize(statistic_name, replicates, sum(g.size for g in groups), seed, method="inverted_cdf")


def unpaired_bootstrap(
    a: Sequence[float],
    b: Sequence[float],
    n_rep: int = DEFAULT_REPLICATES,
    seed: int = 0,
    statistic_name: str = "mean_diff"
) -> BootstrapResult:
    """Percentile bootstrap of mean(a) - mean(b) with independent resampling"""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("unpaired_bootstrap needs at least 2 values per sample")
    rng = np.random.default_rng(seed)
    replicates = _resampled_means(a, n_rep, rng) - _resampled_means(b, n_rep, rng)
    return _summarize(statistic_name, replicates, a.size + b.size, seed)


def follow_up_contrasts(
    groups: Dict[str, Sequence[float]],
    allow_list: Sequence[Tuple[str, str]],
    anova: BootstrapResult,
    n_rep: int = DEFAULT_REPLICATES,
    seed: int = 0
) -> List[BootstrapResult]:
    """
    A priori pairwise contrasts, run only when the F interval is strictly positive

    Equal-length groups are treated as paired (same test episodes).
    """
    if not anova.ci_low > 0:
        return []
    results = []
    for first, second in allow_list:
        if first not in groups or second not in groups:
            raise ValueError(f"Contrast ({first}, {second}) names an unknown group")
        a = np.asarray(groups[first], dtype=float)
        b = np.asarray(groups[second], dtype=float)
        name = f"contrast:{first}-{second}"
        if a.size == b.size:
            results.append(paired_bootstrap(a - b, n_rep, seed, name))
        else:
            results.append(unpaired_bootstrap(a, b, n_rep, seed, name))
    return results


def condition_gt_error(
    model_lengths: Sequence[float],
    gt_lengths: Sequence[float],
    n_rep: int = DEFAULT_REPLICATES,
    seed: int = 0,
    statistic_name: str = "gt_error"
) -> BootstrapResult:
    """Bootstrap CI of the absolute path-length error against GT in the same condition"""
    model_lengths = np.asarray(model_lengths, dtype=float)
    gt_lengths = np.asarray(gt_lengths, dtype=float)
    if model_lengths.shape != gt_lengths.shape:
        raise ValueError(f"Length arrays differ in shape: {model_lengths.shape} vs {gt_lengths.shape}")
    return paired_bootstrap(np.abs(model_lengths - gt_lengths), n_rep, seed, statistic_name)


def counterfactual_shift(
    team: Dict[int, Policy],
    config: WorldConfig,
    condition_from: int,
    condition_to: int,
    n_episodes: int,
    seed: int,
    eps: float = 0.0,
    n_rep: int = DEFAULT_REPLICATES,
    evader_pool: Optional[Sequence[Episode]] = None
) -> Tuple[BootstrapResult, np.ndarray]:
    """
    Signed chaser path-length shift when the condition cue is flipped

    Rolls out paired episodes (same seeds) with flag=condition_from and
    flag=condition_to and bootstraps the per-episode difference to - from.

    Returns:
        (BootstrapResult, per-episode shifts)
    """
    base = rollout(team, config, eps, n_episodes, condition_from, seed, evader_pool)
    flipped = rollout(team, config, eps, n_episodes, condition_to, seed, evader_pool)
    shifts = np.array([b.mean_path_length(CHASER) - a.mean_path_length(CHASER) for a, b in zip(base, flipped)])
    name = f"counterfactual_shift:{condition_from + 1}->{condition_to + 1}"
    return paired_bootstrap(shifts, n_rep, seed, name), shifts


def write_metrics_csv(metrics: Sequence[EpisodeMetrics], path: Union[str, Path], method: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(m) for m in metrics])
    frame.insert(0, "method", method)
    frame.to_csv(path, index=False)
    return path


def write_bootstrap_csv(results: Sequence[BootstrapResult], path: Union[str, Path]) -> Path:
    """Bootstrap summary table preceded by a comment header naming the KDE-gap convention"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{
        "statistic": r.statistic_name,
        "median": r.median,
        "ci_low": r.ci_low,
        "ci_high": r.ci_high,
        "n": r.n,
        "n_replicates": r.n_replicates,
        "seed": r.seed
    } for r in results]
    with open(path, "w", encoding="utf-8") as f:
        for line in REPORT_HEADER.splitlines():
            f.write(f"# {line}\n")
    columns = ["statistic", "median", "ci_low", "ci_high", "n", "n_replicates", "seed"]
    pd.DataFrame(rows, columns=columns).to_csv(path, mode="a", index=False)
    return path


def read_bootstrap_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_violin_csv(metrics_by_method: Dict[str, Sequence[EpisodeMetrics]], path: Union[str, Path]) -> Path:
    """Long-format (method, metric, value) rows for plotting tools"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for method, metrics in metrics_by_method.items():
        for m in metrics:
            for metric in ("episode_return", "path_length", "duration", "dtw_to_gt"):
                rows.append({"method": method, "metric": metric, "value": getattr(m, metric)})
    pd.DataFrame(rows, columns=["method", "metric", "value"]).to_csv(path, index=False)
    return path
