"""Top-K ranking metrics, model evaluation and non-neural baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import Dataset, encode_sessions
from .model import VariantConfig, predict_proba

BASELINES = ("pop", "s_pop", "item_knn")


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Item indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def target_ranks(scores, targets) -> np.ndarray:
    """1-based rank of each target under the (score desc, index asc) order."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    t_score = scores[rows, targets][:, None]
    ahead = (scores > t_score).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    ties_before = ((scores == t_score) & (cols < targets[:, None])).sum(axis=1)
    return 1 + ahead + ties_before


@dataclass
class RankedPrediction:
    probabilities: np.ndarray
    top: np.ndarray

    @classmethod
    def from_scores(cls, scores, k: int | None = None) -> "RankedPrediction":
        scores = np.asarray(scores, dtype=np.float64)
        order = rank_order(scores)
        if k is not None:
            order = order[: min(k, scores.size)]
        return cls(scores, order)

    def rank_of(self, item: int) -> int:
        return int(target_ranks(self.probabilities[None], [item])[0])


def _ranks_from_predictions(predictions, targets) -> np.ndarray:
    if len(targets) == 0:
        raise ValueError("metrics need at least one example")
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions for {len(targets)} targets")
    if isinstance(predictions, np.ndarray):
        return target_ranks(predictions, targets)
    return np.array([p.rank_of(t) if isinstance(p, RankedPrediction) else target_ranks(p, [t])[0]
                     for p, t in zip(predictions, targets)])


def hits_and_rr(ranks: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    hit = ranks <= k
    return hit.astype(np.float64), np.where(hit, 1.0 / ranks, 0.0)


def precision_at_k(predictions, targets: Sequence[int], k: int = 20) -> float:
    """Fraction of examples whose target is ranked within the top ``k``."""
    hit, _ = hits_and_rr(_ranks_from_predictions(predictions, targets), k)
    return float(hit.mean())


def mrr_at_k(predictions, targets: Sequence[int], k: int = 20) -> float:
    """Mean reciprocal rank, counting ranks beyond ``k`` as zero."""
    _, rr = hits_and_rr(_ranks_from_predictions(predictions, targets), k)
    return float(rr.mean())


@dataclass
class MetricReport:
    p_at_k: float
    mrr_at_k: float
    k: int
    n_examples: int

    def to_dict(self, variant: str | None = None, model_k: int | None = None) -> dict:
        return {
            f"p_at_{self.k}": self.p_at_k,
            f"mrr_at_{self.k}": self.mrr_at_k,
            "n_examples": self.n_examples,
            "variant": variant,
            "k": model_k,
            "cutoff": self.k,
        }

    def to_json(self, variant: str | None = None, model_k: int | None = None) -> str:
        return json.dumps(self.to_dict(variant, model_k))


@dataclass
class EvalResult:
    report: MetricReport
    example_ids: list[str]
    targets: np.ndarray
    ranks: np.ndarray
    probabilities: np.ndarray | None = None

    def write_dump(self, path, delimiter: str = "\t") -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(delimiter.join(("example_id", "target", "rank")) + "\n")
            for eid, t, r in zip(self.example_ids, self.targets, self.ranks):
                fh.write(f"{eid}{delimiter}{int(t)}{delimiter}{int(r)}\n")


def prefix_examples(dataset: Dataset) -> tuple[list[tuple[int, ...]], np.ndarray, list[str]]:
    """Every prefix of every session, with ids ``<session_id>:<prefix_length>``."""
    inputs, targets, ids = [], [], []
    for sid, s in zip(dataset.session_ids, dataset.sessions):
        for t in range(1, len(s)):
            inputs.append(tuple(s[:t]))
            targets.append(s[t])
            ids.append(f"{sid}:{t}")
    return inputs, np.array(targets, dtype=np.int64), ids


def score_examples(scores_fn, dataset: Dataset, k: int = 20, chunk: int = 512, keep_probabilities: bool = False) -> EvalResult:
    inputs, targets, ids = prefix_examples(dataset)
    if not inputs:
        raise ValueError("no evaluation examples")
    ranks, kept = [], []
    for i in range(0, len(inputs), chunk):
        scores = scores_fn(inputs[i : i + chunk])
        ranks.append(target_ranks(scores, targets[i : i + chunk]))
        if keep_probabilities:
            kept.append(scores)
    ranks = np.concatenate(ranks)
    hit, rr = hits_and_rr(ranks, k)
    report = MetricReport(float(hit.mean()), float(rr.mean()), k, len(inputs))
    return EvalResult(report, ids, targets, ranks, np.concatenate(kept) if keep_probabilities else None)


def evaluate_params(params, config: VariantConfig, dataset: Dataset, k: int = 20, keep_probabilities: bool = False) -> EvalResult:
    return score_examples(lambda xs: predict_proba(xs, params, config), dataset, k, keep_probabilities=keep_probabilities)


def evaluate(checkpoint, dataset: Dataset, k: int = 20, drop_unknown: bool = False, keep_probabilities: bool = False) -> EvalResult:
    """Eval-mode metrics of a checkpoint over every prefix of ``dataset``.

    ``dataset`` is re-indexed under the checkpoint vocabulary; unknown items
    raise ``KeyError`` listing them unless ``drop_unknown``.
    """
    vocab = {item: i for i, item in enumerate(checkpoint.vocab)}
    if dataset.vocab != vocab:
        dataset = encode_sessions(dataset, vocab, drop_unknown=drop_unknown)
    return evaluate_params(checkpoint.params, checkpoint.config.model, dataset, k, keep_probabilities)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


@dataclass
class TrainStats:
    item_counts: np.ndarray  # clicks per item
    session_counts: np.ndarray  # sessions containing each item
    cooc: sp.csr_matrix  # sessions containing both items, zero diagonal


def train_stats(dataset: Dataset) -> TrainStats:
    V = dataset.n_items
    clicks = np.bincount([v for s in dataset.sessions for v in s], minlength=V).astype(np.float64)
    rows, cols = [], []
    for j, s in enumerate(dataset.sessions):
        for v in set(s):
            rows.append(j)
            cols.append(v)
    X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(dataset.sessions), V))
    cooc = (X.T @ X).tocsr()
    sessions_with = cooc.diagonal().copy()
    cooc.setdiag(0.0)
    cooc.eliminate_zeros()
    return TrainStats(clicks, sessions_with, cooc)


def baseline_scores(kind: str, stats: TrainStats, prefix: Sequence[int]) -> np.ndarray:
    """Scores whose (desc score, asc index) order is the baseline ranking."""
    pop = stats.item_counts
    if kind == "pop":
        return pop.copy()
    if kind == "s_pop":
        within = np.bincount(np.asarray(prefix, dtype=np.int64), minlength=pop.size).astype(np.float64)
        # popularity as a strict fraction below one breaks ties without reordering counts
        return within + pop / (pop.max() + 1.0)
    if kind == "item_knn":
        items = np.unique(np.asarray(prefix, dtype=np.int64))
        cnt = stats.session_counts
        rows = stats.cooc[items].toarray()
        denom = np.sqrt(np.outer(cnt[items], cnt))
        sim = np.divide(rows, denom, out=np.zeros_like(rows), where=denom > 0)
        return sim.sum(axis=0)
    raise ValueError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")


def baseline_predict(kind: str, stats: TrainStats, prefix: Sequence[int], top: int | None = None) -> RankedPrediction:
    scores = baseline_scores(kind, stats, prefix)
    total = scores.sum()
    probs = scores / total if total > 0 else np.full(scores.size, 1.0 / scores.size)
    return RankedPrediction(probs, rank_order(scores)[: top or scores.size])


def evaluate_baseline(kind: str, stats: TrainStats, dataset: Dataset, k: int = 20) -> EvalResult:
    def fn(xs):
        return np.stack([baseline_scores(kind, stats, x) for x in xs])

    return score_examples(fn, dataset, k)
