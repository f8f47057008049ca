"""
Utilization measurements over activation traces: per-neuron max Pearson
score within its (layer, role) group, rank shifts between two profiles,
and the strongly affected / suppressed / indirectly affected split.

Rank convention: rank 0 is the highest max-Pearson score, so a positive
delta (rank_b - rank_a) means the neuron lost utilization position.
"""

from dataclasses import dataclass

import numpy as np

import utils
from constants import DEFAULT_BUCKET_EDGES, DEFAULT_CATEGORY_FRACTION
from errors import AnalysisError, ConfigError, ShapeMismatchError
from model import ActivationTrace, ModelConfig, NeuronId, NeuronLayout
from selector import NeuronMask

# max-Pearson scores are rounded before ranking so float noise cannot break ties
PEARSON_DECIMALS = 12


@dataclass(frozen=True, eq=False)
class UtilizationProfile:
    config: ModelConfig
    max_pearson: np.ndarray
    ranks: np.ndarray
    trace_hash: str = ""

    def __post_init__(self):
        total = NeuronLayout(self.config).total
        if self.max_pearson.shape != (total,) or self.ranks.shape != (total,):
            raise ConfigError(f"profile does not cover {total} neurons")
        if not np.array_equal(np.sort(self.ranks), np.arange(total)):
            raise AnalysisError("ranks are not a permutation of 0..N-1")

    @classmethod
    def from_scores(cls, config: ModelConfig, scores: np.ndarray, trace_hash: str = ""):
        """Ranks by descending score, ties by canonical neuron order"""
        scores = np.round(np.asarray(scores, dtype=np.float64), PEARSON_DECIMALS)
        order = np.lexsort((np.arange(scores.size), -scores))
        ranks = np.empty(scores.size, dtype=np.int64)
        ranks[order] = np.arange(scores.size)
        return cls(config, scores, ranks, trace_hash)


@dataclass(frozen=True, eq=False)
class RankDiffReport:
    config: ModelConfig
    delta_rank: np.ndarray
    avg_abs_delta: float
    buckets: list[dict]

    def plot_rows(self) -> list[tuple[str, float | None]]:
        return [(b["bucket"], b["avg_abs_delta"]) for b in self.buckets]


@dataclass(frozen=True)
class CategoryReport:
    strongly_affected: tuple[NeuronId, ...]
    suppressed: tuple[NeuronId, ...]
    indirectly_affected: tuple[NeuronId, ...]
    threshold: int
    mask_provenance: str
    mask_hash: str


def pearson(x, y) -> float:
    """Sample Pearson r; 0 when either series is constant"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeMismatchError(f"pearson of lengths {x.size} and {y.size}")
    if x.size < 2:
        raise AnalysisError("pearson needs at least 2 samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    r = np.dot(xc, yc) / (np.linalg.norm(xc) * np.linalg.norm(yc))
    return float(np.clip(r, -1.0, 1.0))


def _standardize(samples: np.ndarray) -> np.ndarray:
    """Centered unit-norm columns; constant columns become zero"""
    centered = samples - samples.mean(axis=0)
    norms = np.linalg.norm(centered, axis=0)
    constant = np.all(samples == samples[0], axis=0)
    safe = np.where(constant, 1.0, norms)
    z = centered / safe
    z[:, constant] = 0.0
    return z


def group_max_pearson(samples: np.ndarray) -> np.ndarray:
    """For each column, the max Pearson r against every other column"""
    n = samples.shape[1]
    if n == 1:
        return np.zeros(1)
    z = _standardize(samples.astype(np.float64))
    corr = np.clip(z.T @ z, -1.0, 1.0)
    np.fill_diagonal(corr, -np.inf)
    return corr.max(axis=1)


def utilization_profile(trace: ActivationTrace) -> UtilizationProfile:
    if trace.token_count < 2:
        raise AnalysisError(f"trace has {trace.token_count} tokens; need at least 2")
    layout = NeuronLayout(trace.config)
    spans = [span for _, _, span in layout.groups()]
    parts = utils.ordered_map(lambda s: group_max_pearson(trace.samples[:, s]), spans)
    return UtilizationProfile.from_scores(trace.config, np.concatenate(parts), trace.trace_hash)


def _check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size == 0 or np.any(edges <= 0) or np.any(edges > 100):
        raise AnalysisError("bucket edges must lie in (0, 100]")
    if np.any(np.diff(edges) <= 0):
        raise AnalysisError("bucket edges must be strictly increasing")
    return edges


def rank_diff(
    a: UtilizationProfile, b: UtilizationProfile, bucket_edges=DEFAULT_BUCKET_EDGES
) -> RankDiffReport:
    """
    delta = rank_b - rank_a per neuron, its global mean |delta|, and mean
    |delta| per top-percentile bucket of profile a.

    A neuron of rank r sits at top percentile (r + 1) / N * 100 and falls in
    the first bucket whose upper edge is not below that.
    """
    if not a.config.same_shapes(b.config):
        raise ConfigError("profiles cover different neuron sets")
    edges = _check_edges(bucket_edges)
    n = a.ranks.size
    delta = b.ranks - a.ranks
    abs_delta = np.abs(delta)

    percentile = (a.ranks + 1) / n * 100.0
    which = np.searchsorted(edges, percentile, side="left")
    buckets = []
    lower = 0.0
    for i, upper in enumerate(edges.tolist()):
        members = abs_delta[which == i]
        buckets.append(
            {
                "bucket": f"{lower:g}-{upper:g}%",
                "lower": lower,
                "upper": upper,
                "count": int(members.size),
                "avg_abs_delta": float(members.mean()) if members.size else None,
            }
        )
        lower = upper
    return RankDiffReport(a.config, delta, float(abs_delta.mean()), buckets)


def categorize(diff: RankDiffReport, mask: NeuronMask, threshold: int) -> CategoryReport:
    if threshold < 1:
        raise AnalysisError(f"threshold must be >= 1, got {threshold}")
    layout = NeuronLayout(diff.config)
    in_mask = np.zeros(layout.total, dtype=bool)
    in_mask[mask.indices(layout)] = True

    strongly = np.abs(diff.delta_rank) > threshold
    suppressed = strongly & (diff.delta_rank > 0)
    indirect = strongly & ~in_mask
    return CategoryReport(
        layout.neurons(np.flatnonzero(strongly)),
        layout.neurons(np.flatnonzero(suppressed)),
        layout.neurons(np.flatnonzero(indirect)),
        int(threshold),
        mask.provenance,
        mask.model_hash,
    )


def threshold_from_fraction(total: int, fraction: float = DEFAULT_CATEGORY_FRACTION) -> int:
    if not 0 < fraction <= 1:
        raise AnalysisError(f"threshold fraction {fraction} not in (0, 1]")
    return max(1, utils.round_half_away(fraction * total))


def category_counts(report: CategoryReport) -> dict:
    strongly = len(report.strongly_affected)
    return {
        "threshold": report.threshold,
        "strongly_affected": strongly,
        "suppressed": len(report.suppressed),
        "indirectly_affected": len(report.indirectly_affected),
        "suppressed_ratio": len(report.suppressed) / strongly if strongly else None,
    }
