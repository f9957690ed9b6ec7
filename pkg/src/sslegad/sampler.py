"""Query strategies for the annotation loop.

The two-stage strategy first keeps the highest-entropy third of the unlabeled
pool (model uncertainty), then ranks those survivors by normalized cosine
similarity minus normalized mutual information against the labeled pool and
takes the budget's worth of top scores. Random and entropy-only baselines
share the same interface. All scoring is pure arithmetic over precomputed
probability maps, embeddings and images; ties always break by ascending
sample id so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BudgetError, ConfigError, DataError, ShapeError

SCORE_CSV_HEADER = ("round,sample_id,entropy,cos_raw,mi_raw,cos_norm,mi_norm,"
                    "score,survivor,selected")


@dataclass
class ScoreRecord:
    """Audit record for one unlabeled sample in one selection round.

    Stage-2 fields stay None for samples filtered out by the entropy stage.
    """

    sample_id: int
    entropy: float
    cos_raw: Optional[float] = None
    mi_raw: Optional[float] = None
    cos_norm: Optional[float] = None
    mi_norm: Optional[float] = None
    score: Optional[float] = None
    stage1_survivor: bool = False
    selected: bool = False

    def csv_row(self, round_index: int) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return ",".join([
            str(round_index), str(self.sample_id), repr(float(self.entropy)),
            fmt(self.cos_raw), fmt(self.mi_raw), fmt(self.cos_norm),
            fmt(self.mi_norm), fmt(self.score),
            str(int(self.stage1_survivor)), str(int(self.selected)),
        ])


@dataclass
class SelectionParams:
    budget_b: int
    stage1_fraction: float = 1.0 / 3.0
    histogram_bins: int = 32
    aggregation: str = "mean"

    def __post_init__(self):
        if self.budget_b < 1:
            raise ConfigError(f"budget_b must be >= 1, got {self.budget_b}")
        if not 0 < self.stage1_fraction <= 1:
            raise ConfigError(f"stage1_fraction must be in (0, 1], got {self.stage1_fraction}")
        if self.histogram_bins < 2:
            raise ConfigError(f"histogram_bins must be >= 2, got {self.histogram_bins}")
        if self.aggregation not in ("mean", "max"):
            raise ConfigError(f"aggregation must be mean or max, got {self.aggregation!r}")


@dataclass
class PoolView:
    """Per-sample model outputs the sampler scores: probability maps,
    unit-norm embeddings (row per sample) and raw images."""

    sample_ids: List[int]
    probs: List[np.ndarray]
    embeddings: np.ndarray
    images: List[np.ndarray]


@dataclass
class LabeledRefs:
    """Embeddings and images of the current labeled pool."""

    embeddings: np.ndarray
    images: List[np.ndarray]


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


# ---------------------------------------------------------------------------
# scoring primitives


def predictive_entropy(prob) -> float:
    """Mean per-pixel Shannon entropy of a (C, H, W) probability map,
    natural log, 0*log 0 = 0."""
    p = _as_array(prob)
    if p.ndim != 3:
        raise ShapeError(f"predictive_entropy: expected (C, H, W), got {p.shape}")
    if p.min() < -1e-9 or p.max() > 1 + 1e-9:
        raise DataError("predictive_entropy: probabilities outside [0, 1]")
    sums = p.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise DataError("predictive_entropy: per-pixel class sums differ from 1")
    terms = np.where(p > 0, -p * np.log(np.maximum(p, 1e-300)), 0.0)
    return float(terms.sum() / (p.shape[1] * p.shape[2]))


def cosine_similarity(z_u, z_l) -> float:
    """Dot product of the two embeddings over the product of their norms."""
    u, v = _as_array(z_u).ravel(), _as_array(z_l).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: dims {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("cosine_similarity: zero-norm embedding")
    return float(u @ v / (nu * nv))


def mutual_information(x_u, x_l, bins: int = 32) -> float:
    """Histogram mutual information between two images.

    The joint distribution is a 2-d histogram of co-located intensity pairs
    pooled across all channels, with uniform bins over [0, 1] (last bin
    right-inclusive); terms with zero joint mass contribute nothing.
    """
    if bins < 2:
        raise ConfigError(f"mutual_information: bins must be >= 2, got {bins}")
    a, b = _as_array(x_u), _as_array(x_l)
    if a.shape != b.shape:
        raise ShapeError(f"mutual_information: image shapes {a.shape} vs {b.shape}")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0, 1], [0, 1]])
    total = joint.sum()
    if total == 0:
        return 0.0
    pxy = joint / total
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    outer = px[:, None] * py[None, :]
    nz = pxy > 0
    return float((pxy[nz] * np.log(pxy[nz] / outer[nz])).sum())


def minmax_normalize(values: Sequence[float]) -> np.ndarray:
    """Affine map of the values onto [0, 1]; a constant list maps to all 0.5."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise DataError("minmax_normalize: empty input")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def agreement_diversity_score(cos_norm: float, mi_norm: float) -> float:
    """Normalized agreement minus normalized statistical dependence."""
    return float(cos_norm) - float(mi_norm)


def rank_agreement_diversity(ids: Sequence[int], cos_raw: Sequence[float],
                             mi_raw: Sequence[float], budget: int
                             ) -> Tuple[List[int], np.ndarray, np.ndarray, np.ndarray]:
    """Normalize both raw term lists, score, and pick the budget's top ids.

    Invariant under any positive-affine transform of either raw list (the
    min-max normalization absorbs it); ties break by ascending id.
    """
    cos_n = minmax_normalize(cos_raw)
    mi_n = minmax_normalize(mi_raw)
    scores = cos_n - mi_n
    ranked = sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))
    top = sorted(sid for sid, _ in ranked[:budget])
    return top, cos_n, mi_n, scores


# ---------------------------------------------------------------------------
# strategies


def egad_select(unlabeled: PoolView, labeled: LabeledRefs,
                params: SelectionParams) -> Tuple[List[int], List[ScoreRecord]]:
    """Two-stage selection: entropy filter, then agreement-diversity ranking.

    Returns the selected ids (exactly ``budget_b``, ascending-id tie-breaks)
    plus one ScoreRecord per unlabeled sample for auditing.
    """
    n = len(unlabeled.sample_ids)
    if params.budget_b > n:
        raise BudgetError(f"budget {params.budget_b} exceeds unlabeled pool size {n}")

    records = {
        sid: ScoreRecord(sample_id=sid, entropy=predictive_entropy(prob))
        for sid, prob in zip(unlabeled.sample_ids, unlabeled.probs)
    }

    # stage 1: keep the highest-entropy fraction, floored at the budget so the
    # round stays satisfiable
    keep = max(params.budget_b, math.ceil(params.stage1_fraction * n))
    by_entropy = sorted(records.values(), key=lambda r: (-r.entropy, r.sample_id))
    survivors = by_entropy[:keep]
    for rec in survivors:
        rec.stage1_survivor = True

    # stage 2: aggregated similarity terms against the labeled pool,
    # normalized across survivors
    index_of = {sid: i for i, sid in enumerate(unlabeled.sample_ids)}
    agg = np.mean if params.aggregation == "mean" else np.max
    for rec in survivors:
        i = index_of[rec.sample_id]
        emb = unlabeled.embeddings[i]
        img = unlabeled.images[i]
        cos_vals = [cosine_similarity(emb, lemb) for lemb in labeled.embeddings]
        mi_vals = [mutual_information(img, limg, params.histogram_bins)
                   for limg in labeled.images]
        rec.cos_raw = float(agg(cos_vals))
        rec.mi_raw = float(agg(mi_vals))

    selected_ids, cos_norm, mi_norm, scores = rank_agreement_diversity(
        [r.sample_id for r in survivors],
        [r.cos_raw for r in survivors],
        [r.mi_raw for r in survivors],
        params.budget_b)
    for rec, cn, mn, sc in zip(survivors, cos_norm, mi_norm, scores):
        rec.cos_norm = float(cn)
        rec.mi_norm = float(mn)
        rec.score = float(sc)
    for sid in selected_ids:
        records[sid].selected = True

    ordered_records = [records[sid] for sid in unlabeled.sample_ids]
    return selected_ids, ordered_records


def random_select(sample_ids: Sequence[int], budget: int,
                  seed: Union[int, np.random.Generator]) -> List[int]:
    """Uniform draw without replacement; deterministic under the seed."""
    ids = list(sample_ids)
    if budget < 1 or budget > len(ids):
        raise BudgetError(f"budget {budget} invalid for pool of {len(ids)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=budget, replace=False)
    return sorted(ids[i] for i in picked)


def entropy_select(sample_ids: Sequence[int], entropies: Sequence[float],
                   budget: int) -> List[int]:
    """The ``budget`` highest-entropy ids, ties broken by ascending id."""
    ids = list(sample_ids)
    if budget < 1 or budget > len(ids):
        raise BudgetError(f"budget {budget} invalid for pool of {len(ids)}")
    if len(entropies) != len(ids):
        raise ShapeError("entropy_select: ids and entropies length mismatch")
    order = sorted(zip(ids, entropies), key=lambda t: (-t[1], t[0]))
    return sorted(sid for sid, _ in order[:budget])


def write_score_records(f: IO[str], records: Sequence[ScoreRecord],
                        round_index: int, header: bool = False) -> None:
    if header:
        f.write(SCORE_CSV_HEADER + "\n")
    for rec in records:
        f.write(rec.csv_row(round_index) + "\n")
