"""Retrieval metrics and the module-ablation harness.

Queries come from one camera, the gallery from the remaining cameras.
Each query's gallery is ranked by cosine similarity (descending, ties
broken by ascending gallery index), then summarized as CMC Rank-k and
mean average precision.  Evaluation always sees full member sets: member
dropout is a training-time augmentation only.

The ablation harness trains and evaluates the six module combinations
from scratch on a fixed dataset, varying only the run seed, and reports
per-configuration means and standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import grce
from .diffcore import Tensor
from .encoders import ModelConfig, ModelState, init_model_state
from .mvs import MvsConfig
from .synthdata import Dataset, GroupSample, split_query_gallery, split_train_test
from .trainer import TrainConfig, train_stage1, train_stage2


@dataclass(frozen=True)
class RankedResult:
    """One query's view of the gallery, best match first."""

    query_id: int                 # group id of the query
    order: tuple[int, ...]        # gallery row indices, unique
    scores: tuple[float, ...]     # similarities, non-increasing
    labels: tuple[int, ...]       # gallery group ids in ranked order

    def __post_init__(self):
        if not self.order:
            raise ValueError("empty gallery ranking")
        if len(set(self.order)) != len(self.order):
            raise ValueError("gallery rows ranked more than once")
        if not (len(self.order) == len(self.scores) == len(self.labels)):
            raise ValueError("ranking fields must align")
        if any(b > a + 1e-12 for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def rank_gallery(query_feature, gallery_features, gallery_labels, *, query_id: int) -> RankedResult:
    """Rank gallery rows by cosine similarity to one query feature."""
    q = _as_array(query_feature)
    g = _as_array(gallery_features)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("gallery must be a non-empty matrix")
    if q.shape != (g.shape[1],):
        raise ValueError(f"query shape {q.shape} does not match gallery width {g.shape[1]}")
    if len(gallery_labels) != g.shape[0]:
        raise ValueError("one label per gallery row required")
    norms = np.concatenate([[np.linalg.norm(q)], np.linalg.norm(g, axis=1)])
    if np.max(np.abs(norms - 1.0)) > 1e-6:
        raise ValueError("retrieval expects unit-norm features")
    sims = g @ q
    order = np.argsort(-sims, kind="stable")  # stable: ties keep ascending index
    return RankedResult(
        query_id=int(query_id),
        order=tuple(int(i) for i in order),
        scores=tuple(float(sims[i]) for i in order),
        labels=tuple(int(gallery_labels[i]) for i in order),
    )


def cmc(results: Sequence[RankedResult], k: int) -> float:
    """Fraction of queries with a correct match somewhere in the top k."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not results:
        raise ValueError("no queries")
    hits = sum(1 for r in results if r.query_id in r.labels[:k])
    return hits / len(results)


def mean_average_precision(results: Sequence[RankedResult]) -> float:
    if not results:
        raise ValueError("no queries")
    aps = []
    for r in results:
        precisions = []
        seen = 0
        for rank, label in enumerate(r.labels, start=1):
            if label == r.query_id:
                seen += 1
                precisions.append(seen / rank)
        if not precisions:
            raise ValueError(f"query group {r.query_id} has no relevant gallery entry")
        aps.append(sum(precisions) / len(precisions))
    return float(np.mean(aps))


@dataclass(frozen=True)
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    n_query: int
    n_gallery: int

    def __post_init__(self):
        if not (0.0 <= self.rank1 <= self.rank5 <= self.rank10 <= 1.0):
            raise ValueError("CMC must be non-decreasing in k and lie in [0, 1]")
        if not (0.0 <= self.mAP <= 1.0):
            raise ValueError("mAP must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "mAP": self.mAP,
            "n_query": self.n_query,
            "n_gallery": self.n_gallery,
        }


def report_from_results(results: Sequence[RankedResult], n_gallery: int) -> RetrievalReport:
    return RetrievalReport(
        rank1=cmc(results, 1),
        rank5=cmc(results, 5),
        rank10=cmc(results, 10),
        mAP=mean_average_precision(results),
        n_query=len(results),
        n_gallery=n_gallery,
    )


# --------------------------------------------------------------------------
# Feature extraction and the cross-camera protocol


def extract_features(
    state: ModelState,
    samples: Sequence[GroupSample],
    *,
    refined: bool,
    quantity: bool,
) -> np.ndarray:
    """One unit-norm feature row per sample; full member sets, no recording."""
    rows = [
        grce.group_forward(s, state, None, quantity=quantity, refined=refined).values
        for s in samples
    ]
    return np.stack(rows)


def evaluate(
    state: ModelState,
    samples: Sequence[GroupSample],
    query_camera: int = 0,
    *,
    refined: bool,
    quantity: bool,
) -> RetrievalReport:
    queries, gallery = split_query_gallery(samples, query_camera)
    q_feats = extract_features(state, queries, refined=refined, quantity=quantity)
    g_feats = extract_features(state, gallery, refined=refined, quantity=quantity)
    g_labels = [s.group_id for s in gallery]
    results = [
        rank_gallery(q_feats[i], g_feats, g_labels, query_id=queries[i].group_id)
        for i in range(len(queries))
    ]
    return report_from_results(results, n_gallery=len(gallery))


# --------------------------------------------------------------------------
# Ablation harness

# name, (prompt learning, member dropout + count term, refinement head)
ABLATION_ROWS: tuple[tuple[str, bool, bool, bool], ...] = (
    ("Base", False, False, False),
    ("+GLA", True, False, False),
    ("+MVS", False, True, False),
    ("+GRCE", False, False, True),
    ("+GLA+MVS", True, True, False),
    ("Full", True, True, True),
)

_METRICS = ("rank1", "rank5", "rank10", "mAP")


def run_single(
    ds: Dataset,
    model_base: ModelConfig,
    train_base: TrainConfig,
    seed: int,
    *,
    use_gla: bool,
    use_mvs: bool,
    use_grce: bool,
    mvs_cfg: MvsConfig | None = None,
    alpha: float = 0.3,
    epsilon: float = 0.1,
    train_fraction: float = 0.7,
    query_camera: int = 0,
) -> RetrievalReport:
    """Train the selected modules from scratch and evaluate on the test split.

    Without prompt learning there is nothing for stage 1 to optimize, so
    the count matrix keeps its neutral zero initialization; without the
    refinement head there is no stage 2.  Stage 2 drops the image-text
    term when no prompts were learned.
    """
    train_gids, test_gids = split_train_test(ds, train_fraction)
    train_samples = [s for s in ds.samples if s.group_id in set(train_gids)]
    test_samples = [s for s in ds.samples if s.group_id in set(test_gids)]
    rosters = ds.group_rosters()

    cfg = replace(
        model_base,
        d_a=ds.d_a,
        n_person_ids=max(ds.person_ids()) + 1,
        n_group_classes=len(train_gids),
    )
    state = init_model_state(cfg, seed)
    masks_cfg = (mvs_cfg or MvsConfig()) if use_mvs else None

    if use_gla:
        stage1 = replace(train_base, stage=1, seed=seed)
        state, _ = train_stage1(state, train_samples, rosters, stage1, mvs=masks_cfg)
    if use_grce:
        stage2 = replace(train_base, stage=2, seed=seed)
        state, _ = train_stage2(
            state, train_samples, rosters, stage2,
            mvs=masks_cfg, use_text=use_gla, alpha=alpha, epsilon=epsilon,
        )
    return evaluate(
        state, test_samples, query_camera, refined=use_grce, quantity=use_mvs
    )


def run_ablation(
    ds: Dataset,
    model_base: ModelConfig,
    train_base: TrainConfig,
    seeds: Sequence[int],
    *,
    mvs_cfg: MvsConfig | None = None,
    alpha: float = 0.3,
    epsilon: float = 0.1,
    train_fraction: float = 0.7,
    query_camera: int = 0,
) -> list[dict]:
    """Mean and standard deviation per configuration over the run seeds."""
    if len(seeds) < 3:
        raise ValueError("ablation averaging needs at least three seeds")
    rows = []
    for name, use_gla, use_mvs, use_grce in ABLATION_ROWS:
        reports = [
            run_single(
                ds, model_base, train_base, seed,
                use_gla=use_gla, use_mvs=use_mvs, use_grce=use_grce,
                mvs_cfg=mvs_cfg, alpha=alpha, epsilon=epsilon,
                train_fraction=train_fraction, query_camera=query_camera,
            )
            for seed in seeds
        ]
        row = {"name": name, "gla": use_gla, "mvs": use_mvs, "grce": use_grce}
        for metric in _METRICS:
            vals = np.array([getattr(r, metric) for r in reports])
            row[f"{metric}_mean"] = float(np.mean(vals))
            row[f"{metric}_std"] = float(np.std(vals))
        row["per_seed"] = [r.to_dict() for r in reports]
        rows.append(row)
    return rows


def format_ablation_table(rows: Sequence[Mapping]) -> str:
    """Aligned plain-text table, one line per configuration."""
    header = f"{'config':<10}" + "".join(f"{m:>16}" for m in _METRICS)
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = "".join(
            f"{row[f'{m}_mean']:>8.3f} ±{row[f'{m}_std']:<6.3f}" for m in _METRICS
        )
        lines.append(f"{row['name']:<10}" + cells)
    return "\n".join(lines)
