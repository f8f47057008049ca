"""
Neuron selection: cosine diffing of two checkpoints, bottom/top-k masks,
mask algebra, and the ridge-probe selector.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

import utils
from constants import COSINE_SLACK, Role, SelectionMode
from errors import (
    ConfigError,
    MaskError,
    ModelHashMismatchError,
    ProbeError,
    ShapeMismatchError,
)
from model import ModelConfig, NeuronId, NeuronLayout, ParameterSet, sort_neurons


@dataclass(frozen=True, eq=False)
class SimilarityReport:
    """scores[j] is the cosine score of canonical neuron j between org and ft"""

    config: ModelConfig
    scores: np.ndarray
    org_hash: str
    ft_hash: str

    def __post_init__(self):
        total = NeuronLayout(self.config).total
        if self.scores.shape != (total,):
            raise ConfigError(f"{self.scores.shape[0]} scores for {total} neurons")

    def score(self, nid: NeuronId) -> float:
        return float(self.scores[NeuronLayout(self.config).index(nid)])


@dataclass(frozen=True)
class NeuronMask:
    neurons: tuple[NeuronId, ...]
    fraction: float
    provenance: str
    model_hash: str
    total: int

    def __post_init__(self):
        ids = tuple(NeuronId(int(l), Role(r), int(w)) for l, r, w in self.neurons)
        if len(set(ids)) != len(ids):
            raise MaskError("mask contains duplicate neurons")
        if ids != sort_neurons(ids):
            raise MaskError("mask neurons are not in canonical order")
        object.__setattr__(self, "neurons", ids)

    def __len__(self) -> int:
        return len(self.neurons)

    def __contains__(self, nid) -> bool:
        return NeuronId(nid[0], Role(nid[1]), nid[2]) in set(self.neurons)

    def indices(self, layout: NeuronLayout) -> np.ndarray:
        """Flat canonical indices; raises MaskError on neurons the layout does not have"""
        if layout.total != self.total:
            raise MaskError(
                f"mask was built for {self.total} neurons, model has {layout.total}"
            )
        return layout.indices(self.neurons)


def mask_from_indices(
    layout: NeuronLayout, indices, fraction: float, provenance: str, model_hash: str
) -> NeuronMask:
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    return NeuronMask(layout.neurons(idx), fraction, provenance, model_hash, layout.total)


def full_mask(params: ParameterSet, provenance: str = "all") -> NeuronMask:
    layout = NeuronLayout(params.config)
    return mask_from_indices(
        layout, np.arange(layout.total), 1.0, provenance, params.content_hash
    )


def cosine(u, v) -> float:
    """Cosine similarity; 1 when both vectors are zero, 0 when only one is"""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or u.size == 0:
        raise ShapeMismatchError(f"cosine of lengths {u.size} and {v.size}")
    return float(row_cosines(u[None, :], v[None, :])[0])


def row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine of each row pair of two equal-shape matrices, same degenerate rules as cosine"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"row cosine of shapes {list(a.shape)} and {list(b.shape)}")
    dots = np.einsum("ij,ij->i", a, b)
    na2 = np.einsum("ij,ij->i", a, a)
    nb2 = np.einsum("ij,ij->i", b, b)
    za, zb = ~np.any(a, axis=1), ~np.any(b, axis=1)
    both = ~za & ~zb & (na2 * nb2 > 0)
    out = np.where(za & zb, 1.0, 0.0)
    out[both] = dots[both] / np.sqrt(na2[both] * nb2[both])
    # identical rows score exactly 1
    out[np.all(a == b, axis=1)] = 1.0
    return np.clip(out, -1.0, 1.0)


def neuron_similarity(org: ParameterSet, ft: ParameterSet) -> SimilarityReport:
    """Cosine score for every up/down row of org vs. ft; embed and head are not scored"""
    if not org.config.same_shapes(ft.config):
        raise ConfigError("checkpoints have different model shapes")
    layout = NeuronLayout(org.config)
    groups = list(layout.groups())

    def score_group(group):
        layer, role, _ = group
        name = layout.matrix_name(layer, role)
        return row_cosines(org.tensors[name], ft.tensors[name])

    scores = np.concatenate(utils.ordered_map(score_group, groups))
    # rounding slack is clamped away on write
    scores = np.clip(scores, -1.0 - COSINE_SLACK, 1.0 + COSINE_SLACK).clip(-1.0, 1.0)
    return SimilarityReport(org.config, scores, org.content_hash, ft.content_hash)


def budget(fraction: float, total: int) -> int:
    if not 0 < fraction <= 1:
        raise MaskError(f"fraction {fraction} not in (0, 1]")
    return utils.round_half_away(fraction * total)


def ranking(scores: np.ndarray, mode: SelectionMode) -> np.ndarray:
    """
    Neuron indices in selection order.

    Sensitive order is ascending score with canonical tie-break; reversed
    order is exactly its reverse, so a sensitive prefix and a reversed
    prefix never overlap while their sizes sum to at most N.
    """
    idx = np.arange(scores.shape[0])
    ascending = np.lexsort((idx, scores))
    if SelectionMode(mode) == SelectionMode.SENSITIVE:
        return ascending
    return ascending[::-1]


def _percent(fraction: float) -> str:
    return f"{fraction * 100:g}%"


def select_neurons(
    report: SimilarityReport, fraction: float, mode: SelectionMode = SelectionMode.SENSITIVE
) -> NeuronMask:
    """
    The k = round(fraction * N) neurons first in `ranking` order.

    Sensitive mode takes the lowest scores, ties to the lower canonical
    index. Reversed mode takes the highest scores, ties to the higher
    canonical index, so it is the mirror of sensitive mode and the two
    selections stay disjoint whenever their budgets sum to at most N.
    """
    mode = SelectionMode(mode)
    layout = NeuronLayout(report.config)
    k = budget(fraction, layout.total)
    chosen = ranking(report.scores, mode)[:k]
    return mask_from_indices(
        layout, chosen, fraction, f"{mode}@{_percent(fraction)}", report.org_hash
    )


def _check_pair(a: NeuronMask, b: NeuronMask):
    if a.model_hash != b.model_hash or a.total != b.total:
        raise ModelHashMismatchError(
            f"masks belong to different models ({a.model_hash} vs {b.model_hash})"
        )


def union_masks(a: NeuronMask, b: NeuronMask) -> NeuronMask:
    _check_pair(a, b)
    merged = sort_neurons(set(a.neurons) | set(b.neurons))
    return NeuronMask(
        merged,
        len(merged) / a.total,
        f"union({a.provenance},{b.provenance})",
        a.model_hash,
        a.total,
    )


def overlap(a: NeuronMask, b: NeuronMask) -> float:
    """|a & b| / min(|a|, |b|)"""
    _check_pair(a, b)
    if len(a) == 0 or len(b) == 0:
        raise MaskError("overlap of an empty mask is undefined")
    shared = len(set(a.neurons) & set(b.neurons))
    return shared / min(len(a), len(b))


def select_hybrid(
    report: SimilarityReport, base_fraction: float, reversed_fraction: float
) -> NeuronMask:
    """Sensitive base selection plus the highest-similarity neurons"""
    base = select_neurons(report, base_fraction, SelectionMode.SENSITIVE)
    extra = select_neurons(report, reversed_fraction, SelectionMode.REVERSED)
    merged = union_masks(base, extra)
    return NeuronMask(
        merged.neurons,
        merged.fraction,
        f"{base.provenance}+{extra.provenance}",
        merged.model_hash,
        merged.total,
    )


def similarity_summary(report: SimilarityReport, mask: NeuronMask, within=None) -> dict:
    """
    Mean/min/max score inside vs. outside a mask.

    `within` optionally restricts the comparison population to a subset of
    canonical indices (e.g. the up rows of one layer).
    """
    layout = NeuronLayout(report.config)
    inside = np.zeros(layout.total, dtype=bool)
    inside[mask.indices(layout)] = True
    population = np.ones(layout.total, dtype=bool)
    if within is not None:
        population[:] = False
        population[np.asarray(within, dtype=np.int64)] = True

    def stats(sel):
        vals = report.scores[sel & population]
        if vals.size == 0:
            return {"count": 0, "mean": None, "min": None, "max": None}
        return {
            "count": int(vals.size),
            "mean": float(vals.mean()),
            "min": float(vals.min()),
            "max": float(vals.max()),
        }

    return {"inside": stats(inside), "outside": stats(~inside)}


def overlap_curve(
    report_a: SimilarityReport,
    report_b: SimilarityReport,
    fractions,
    mode: SelectionMode = SelectionMode.SENSITIVE,
) -> list[dict]:
    if report_a.org_hash != report_b.org_hash:
        raise ModelHashMismatchError("reports were diffed against different originals")
    return [
        {
            "fraction": float(f),
            "overlap": overlap(
                select_neurons(report_a, f, mode), select_neurons(report_b, f, mode)
            ),
        }
        for f in fractions
    ]


@dataclass(frozen=True, eq=False)
class ProbeModel:
    """One-vs-rest ridge probe; weights[c] is the decision direction of class c"""

    weights: np.ndarray
    bias: np.ndarray
    lam: float
    fit_intercept: bool = False
    layer: int | None = None

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision(X), axis=1)

    def accuracy(self, X, labels) -> float:
        return float(np.mean(self.predict(X) == np.asarray(labels)))


def fit_probe(
    X,
    labels,
    lam: float,
    fit_intercept: bool = False,
    n_classes: int | None = None,
    layer: int | None = None,
) -> ProbeModel:
    """
    Closed-form ridge per class: w_c = (X^T X + lam I)^-1 X^T y_c with y_c in {-1, +1}.

    With fit_intercept the columns are centered first and the intercept is
    left unpenalized.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ProbeError(f"design matrix {list(X.shape)} does not match {y.size} labels")
    if lam < 0:
        raise ProbeError(f"ridge lambda must be >= 0, got {lam}")
    n_classes = n_classes or int(y.max()) + 1
    if X.shape[0] < n_classes:
        raise ProbeError(f"{X.shape[0]} examples for {n_classes} classes")

    targets = np.where(y[:, None] == np.arange(n_classes)[None, :], 1.0, -1.0)
    if fit_intercept:
        x_mean, y_mean = X.mean(axis=0), targets.mean(axis=0)
    else:
        x_mean, y_mean = np.zeros(X.shape[1]), np.zeros(n_classes)
    Xc, Yc = X - x_mean, targets - y_mean

    gram = Xc.T @ Xc + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(Xc) < X.shape[1]:
        raise ProbeError("design matrix is rank deficient; use lambda > 0")
    try:
        W = scipy.linalg.solve(gram, Xc.T @ Yc, assume_a="pos").T
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise ProbeError(f"ridge system is singular ({e}); use lambda > 0") from None
    bias = y_mean - W @ x_mean
    return ProbeModel(W, bias, float(lam), fit_intercept, layer)


def probe_select(params: ParameterSet, probe: ProbeModel, k: int) -> NeuronMask:
    """Top-k up rows by max over classes of |cosine(row, w_c)|"""
    config = params.config
    layout = NeuronLayout(config)
    if probe.weights.shape[1] != config.d_model:
        raise ProbeError(
            f"probe width {probe.weights.shape[1]} != d_model {config.d_model}"
        )
    eligible = config.n_layers * config.d_hidden
    if not 0 <= k <= eligible:
        raise MaskError(f"k={k} exceeds the {eligible} up neurons")

    index_parts, score_parts = [], []
    for layer, role, span in layout.groups():
        if role != Role.UP:
            continue
        rows = params.up(layer).astype(np.float64)
        per_class = [
            np.abs(row_cosines(rows, np.broadcast_to(w, rows.shape))) for w in probe.weights
        ]
        score_parts.append(np.max(per_class, axis=0))
        index_parts.append(np.arange(span.start, span.stop))
    idx = np.concatenate(index_parts)
    scores = np.concatenate(score_parts)
    chosen = idx[np.lexsort((idx, -scores))[:k]]
    return mask_from_indices(layout, chosen, k / layout.total, f"probe@{k}", params.content_hash)
