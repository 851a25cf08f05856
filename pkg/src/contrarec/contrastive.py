"""Dropout-twin positives, same-last-item negatives, and the
temperature-scaled contrastive loss.

The memory bank caches, per training session, the pair of hybrid
embeddings produced by the two stochastic forward passes of the step
that last visited it. Negative samples for an anchor are read from the
bank instead of being recomputed; they enter the loss as constants, so
no gradient ever flows through them.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .graph import GraphBatch

SAME_LAST_ITEM = "same-last-item"
RANDOM = "random"


def _normalize_rows(x):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > ad.NORM_EPS)


class MemoryBank:
    """Per-session twin-embedding cache with a last-item inverted index.

    Entries start invalid (epoch-one cold start); a session's entry
    becomes valid the first time the training loop stores its twins.
    """

    def __init__(self, last_items, dim: int):
        last_items = np.asarray(last_items, dtype=np.int64)
        n = len(last_items)
        self.first = np.zeros((n, dim), dtype=np.float64)
        self.second = np.zeros((n, dim), dtype=np.float64)
        self.valid = np.zeros(n, dtype=bool)
        self.last_items = last_items
        self.by_last_item = {}
        for sid, item in enumerate(last_items):
            self.by_last_item.setdefault(int(item), []).append(sid)
        self.by_last_item = {k: np.asarray(v, dtype=np.int64)
                             for k, v in self.by_last_item.items()}

    def __len__(self):
        return len(self.valid)

    def update(self, session_ids, first, second):
        """Overwrite entries with detached copies of this step's twins."""
        session_ids = np.asarray(session_ids, dtype=np.int64)
        if session_ids.size and (session_ids.min() < 0 or session_ids.max() >= len(self)):
            raise ContractError("MemoryBank.update: unknown session id")
        self.first[session_ids] = np.array(first, dtype=np.float64, copy=True)
        self.second[session_ids] = np.array(second, dtype=np.float64, copy=True)
        self.valid[session_ids] = True


def sample_negatives(bank: MemoryBank, session_id: int, last_item: int,
                     n_sessions: int, strategy: str, rng):
    """Draw negative vectors for one anchor from the bank.

    Same-last-item strategy samples up to ``n_sessions`` valid sessions
    sharing the anchor's last item (never the anchor itself) and returns
    both cached twins of each; with no such session it falls back to
    uniform sampling over all valid entries. Returns (vectors (2k, d),
    fallback flag); vectors is empty when the bank has nothing valid.
    """
    if n_sessions < 1:
        raise ContractError(f"sample_negatives: n_sessions {n_sessions} < 1")
    if strategy not in (SAME_LAST_ITEM, RANDOM):
        raise ContractError(f"sample_negatives: unknown strategy {strategy!r}")

    def pick(pool):
        if len(pool) <= n_sessions:
            return pool
        return rng.choice(pool, size=n_sessions, replace=False)

    fallback = False
    chosen = np.empty(0, dtype=np.int64)
    if strategy == SAME_LAST_ITEM:
        same = bank.by_last_item.get(int(last_item), np.empty(0, dtype=np.int64))
        pool = same[(same != session_id) & bank.valid[same]]
        if len(pool):
            chosen = pick(pool)
        else:
            fallback = True
    if strategy == RANDOM or (fallback and chosen.size == 0):
        all_ids = np.flatnonzero(bank.valid)
        pool = all_ids[all_ids != session_id]
        if len(pool):
            chosen = pick(pool)
        else:
            fallback = False  # nothing valid at all: skip, not a fallback draw
    if chosen.size == 0:
        return np.zeros((0, bank.first.shape[1])), fallback
    return np.concatenate([bank.first[chosen], bank.second[chosen]], axis=0), fallback


def build_negative_batch(bank: MemoryBank, batch: GraphBatch, n_sessions: int,
                         strategy: str, rng):
    """Assemble per-anchor negatives into a padded (B, K, d) block.

    Returns (negatives array, mask (B, K) bool, fallback count). K is 0
    when no anchor found any negatives.
    """
    per_anchor = []
    fallbacks = 0
    for sid, last in zip(batch.session_ids, batch.last_items):
        vectors, fb = sample_negatives(bank, int(sid), int(last), n_sessions, strategy, rng)
        fallbacks += int(fb)
        per_anchor.append(vectors)
    b = len(per_anchor)
    k_max = max((len(v) for v in per_anchor), default=0)
    dim = bank.first.shape[1]
    negatives = np.zeros((b, k_max, dim), dtype=np.float64)
    mask = np.zeros((b, k_max), dtype=bool)
    for i, vectors in enumerate(per_anchor):
        negatives[i, : len(vectors)] = vectors
        mask[i, : len(vectors)] = True
    return negatives, mask, fallbacks


def twin_forward(model, batch: GraphBatch, rng, training: bool = True):
    """Two stochastic forward passes forming the positive pair."""
    if not training:
        raise ContractError("twin_forward: twins are undefined outside training mode")
    first = model.forward(batch, rng=rng, training=True)
    second = model.forward(batch, rng=rng, training=True)
    return first, second


def contrastive_loss_batch(s1: Tensor, s2: Tensor, negatives, neg_mask,
                           tau: float, literal_form: bool = False) -> Tensor:
    """Per-anchor contrastive losses, shape (B,).

    Cosine similarities, temperature tau; the positive pair sits against
    the anchor's sampled negatives. Anchors with no negatives contribute
    exactly 0. ``literal_form`` counts the positive term once per
    negative in the denominator instead of once overall (kept for
    comparison; the standard form is the default).
    """
    if tau <= 0:
        raise ContractError(f"contrastive_loss: tau {tau} must be positive")
    n1 = ad.l2_normalize(s1)
    n2 = ad.l2_normalize(s2)
    pos = ad.tensor_sum(ad.mul(n1, n2), axis=-1, keepdims=True)     # (B, 1)
    b, d = s1.shape
    negatives = np.asarray(negatives, dtype=np.float64)
    k = negatives.shape[1] if negatives.ndim == 3 else 0
    if k == 0:
        return ad.scalar_mul(ad.reshape(pos, (b,)), 0.0)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    neg_dirs = ad.constant(_normalize_rows(negatives))
    neg_sims = ad.tensor_sum(ad.mul(ad.reshape(n1, (b, 1, d)), neg_dirs), axis=-1)
    counts = neg_mask.sum(axis=1)
    pos_col = ad.scalar_mul(pos, 1.0 / tau)
    if literal_form:
        # denominator repeats the positive exponent once per negative
        pos_col = ad.add(pos_col, ad.constant(np.log(np.maximum(counts, 1))[:, None]))
    logits = ad.concat([pos_col, ad.scalar_mul(neg_sims, 1.0 / tau)], axis=1)
    mask = np.concatenate([np.ones((b, 1), dtype=bool), neg_mask], axis=1)
    lse = ad.logsumexp(logits, mask=mask)
    return ad.sub(lse, ad.reshape(ad.scalar_mul(pos, 1.0 / tau), (b,)))


def contrastive_loss(s1, s2, negatives, tau: float, literal_form: bool = False) -> Tensor:
    """Single-anchor convenience wrapper; returns a scalar tensor."""
    s1 = ad.as_tensor(s1)
    s2 = ad.as_tensor(s2)
    d = s1.shape[-1]
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, d) \
        if np.size(negatives) else np.zeros((0, d))
    k = len(negatives)
    batch = contrastive_loss_batch(
        ad.reshape(s1, (1, d)), ad.reshape(s2, (1, d)),
        negatives[None, :, :] if k else np.zeros((1, 0, d)),
        np.ones((1, k), dtype=bool), tau, literal_form=literal_form)
    return ad.reshape(batch, ())
