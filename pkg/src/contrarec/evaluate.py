"""Ranking metrics, popularity statistics, classical baselines, and the
shared-last-item confusion analysis.

Ranked lists are item indices in descending score order with ties broken
by ascending index, so every ranking in the package is total and
deterministic. Popularity counts come from the training sessions the
model actually saw (items plus labels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .graph import batch_graphs


# ---------------------------------------------------------------------------
# ranking


def rank_scores(scores, k: int, exclude=None) -> np.ndarray:
    """Top-k item indices (1-based) for one score row over items 1..m."""
    if k < 1:
        raise ContractError(f"rank_scores: k {k} < 1")
    scores = np.asarray(scores, dtype=np.float64)
    if exclude:
        scores = scores.copy()
        for item in exclude:
            if 1 <= item <= scores.shape[0]:
                scores[item - 1] = -np.inf
    m = scores.shape[0]
    order = np.lexsort((np.arange(m), -scores))
    return order[: min(k, m)] + 1


def rank_sessions(model, sessions, k: int, batch_size: int = 512,
                  exclude_own_items: bool = False) -> list:
    """Eval-mode ranked lists for a sequence of sessions."""
    ranked = []
    for lo in range(0, len(sessions), batch_size):
        chunk = sessions[lo: lo + batch_size]
        batch = batch_graphs(chunk)
        logits = model.forward(batch, training=False).logits.data
        for row, session in zip(logits, chunk):
            exclude = session.items if exclude_own_items else None
            ranked.append(rank_scores(row, k, exclude=exclude))
    return ranked


# ---------------------------------------------------------------------------
# metrics


def _check_counts(ranked_lists, labels):
    if len(ranked_lists) != len(labels):
        raise ContractError(
            f"metrics: {len(ranked_lists)} ranked lists vs {len(labels)} labels")
    if not ranked_lists:
        raise ContractError("metrics: empty input")


def recall_at_k(ranked_lists, labels, k: int) -> float:
    """Fraction of sessions whose label appears in the top k."""
    if k < 1:
        raise ContractError(f"recall_at_k: k {k} < 1")
    _check_counts(ranked_lists, labels)
    hits = sum(int(label in list(ranked[:k])) for ranked, label in zip(ranked_lists, labels))
    return hits / len(labels)


def mrr_at_k(ranked_lists, labels, k: int) -> float:
    """Mean of 1/rank for hits within the top k, 0 for misses."""
    if k < 1:
        raise ContractError(f"mrr_at_k: k {k} < 1")
    _check_counts(ranked_lists, labels)
    total = 0.0
    for ranked, label in zip(ranked_lists, labels):
        head = list(ranked[:k])
        if label in head:
            total += 1.0 / (head.index(label) + 1)
    return total / len(labels)


def arp(ranked_lists, popularity, k: int):
    """Average recommendation popularity.

    Mean over sessions of (sum of training popularity over the list) / k.
    Items without a popularity entry count 0; returns (value, number of
    such misses).
    """
    if k < 1:
        raise ContractError(f"arp: k {k} < 1")
    if not ranked_lists:
        raise ContractError("arp: empty input")
    popularity = np.asarray(popularity, dtype=np.float64)
    missing = 0
    total = 0.0
    for ranked in ranked_lists:
        mass = 0.0
        for item in ranked[:k]:
            if 0 <= item < popularity.shape[0]:
                mass += popularity[item]
            else:
                missing += 1
        total += mass / k
    return total / len(ranked_lists), missing


def train_popularity(sessions, num_items: int) -> np.ndarray:
    """Occurrence counts over the training sessions the model saw.

    Index i holds item i's count across session items and labels;
    index 0 (padding) stays 0.
    """
    phi = np.zeros(num_items + 1, dtype=np.float64)
    for s in sessions:
        for item in s.items:
            phi[item] += 1
        phi[s.label] += 1
    return phi


# ---------------------------------------------------------------------------
# baselines


def baseline_pop(popularity, k: int) -> np.ndarray:
    """Globally most popular items; the same list for every session."""
    return rank_scores(np.asarray(popularity, dtype=np.float64)[1:], k)


def baseline_spop(session, popularity, k: int) -> np.ndarray:
    """Popularity ranking boosted by the session's repeated items.

    Items occurring more than once in the session rank first (by
    in-session count, then global popularity); everything else falls back
    to plain popularity, so repeat-free sessions reduce exactly to the
    global ranking.
    """
    popularity = np.asarray(popularity, dtype=np.float64)
    m = popularity.shape[0] - 1
    boost = np.zeros(m, dtype=np.float64)
    counts = {}
    for item in session.items:
        counts[item] = counts.get(item, 0) + 1
    for item, c in counts.items():
        if c > 1:
            boost[item - 1] = c
    pop = popularity[1:]
    pop_rank = pop / (pop.max() + 1.0)  # strictly < 1: never outranks a boost step
    return rank_scores(boost + pop_rank, k)


class ItemKnn:
    """Item-to-item collaborative filtering over binary session incidence.

    Similarity between two items is the cosine between their session
    membership vectors; a candidate's score for a session is its summed
    similarity to the session's (distinct) items. Items unseen in
    training keep similarity 0 everywhere.
    """

    def __init__(self, train_sessions, num_items: int):
        occurrences = np.zeros(num_items + 1, dtype=np.float64)
        co = np.zeros((num_items + 1, num_items + 1), dtype=np.float64)
        for s in train_sessions:
            members = sorted(set(s.items) | {s.label})
            for i in members:
                occurrences[i] += 1
            members = np.asarray(members)
            co[np.ix_(members, members)] += 1
        norms = np.sqrt(occurrences)
        denom = np.outer(norms, norms)
        self.similarity = np.divide(co, denom, out=np.zeros_like(co), where=denom > 0)
        np.fill_diagonal(self.similarity, 0.0)
        self.num_items = num_items

    def recommend(self, session, k: int) -> np.ndarray:
        scores = np.zeros(self.num_items + 1, dtype=np.float64)
        for item in set(session.items):
            if item <= self.num_items:
                scores += self.similarity[item]
        return rank_scores(scores[1:], k)


def baseline_rankings(name: str, train_sessions, test_sessions, num_items: int,
                      k: int) -> list:
    """Ranked lists for one named baseline over the test sessions."""
    phi = train_popularity(train_sessions, num_items)
    if name == "pop":
        ranked = baseline_pop(phi, k)
        return [ranked for _ in test_sessions]
    if name == "spop":
        return [baseline_spop(s, phi, k) for s in test_sessions]
    if name == "itemknn":
        knn = ItemKnn(train_sessions, num_items)
        return [knn.recommend(s, k) for s in test_sessions]
    raise ContractError(f"baseline_rankings: unknown baseline {name!r}")


# ---------------------------------------------------------------------------
# shared-last-item confusion analysis


@dataclass
class ConfusionReport:
    """How varied the recommendations over one cohort are."""

    item_counts: dict            # item -> appearances across all top-k lists
    distinct_items: int
    rows: list                   # (item, count, rank) sorted by count desc

    def csv_rows(self):
        yield "item_id,count,rank"
        for item, count, rank in self.rows:
            yield f"{item},{count},{rank}"


def confusion_analysis(ranked_lists, k: int) -> ConfusionReport:
    """Count, per item, how often it appears across the cohort's top-k
    lists; needs at least two sessions to say anything about confusion."""
    if len(ranked_lists) < 2:
        raise ContractError("confusion_analysis: cohort needs >= 2 sessions")
    counts = {}
    for ranked in ranked_lists:
        for item in ranked[:k]:
            counts[int(item)] = counts.get(int(item), 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rows = [(item, count, rank) for rank, (item, count) in enumerate(ordered, start=1)]
    return ConfusionReport(item_counts=counts, distinct_items=len(counts), rows=rows)


def most_common_last_item(sessions) -> int:
    """The most frequent final item, ties broken by ascending index."""
    if not sessions:
        raise ContractError("most_common_last_item: no sessions")
    counts = {}
    for s in sessions:
        counts[s.items[-1]] = counts.get(s.items[-1], 0) + 1
    return min(counts, key=lambda item: (-counts[item], item))


def session_cohort(sessions, last_item: int) -> list:
    """All sessions ending in the given item."""
    return [s for s in sessions if s.items[-1] == last_item]
