"""Session log ingestion, filtering, augmentation, and synthetic data.

Raw logs are delimited text files of (session-id, item-id, order-key)
records described by a LogFormat, so differently shaped exports load
without code changes. Preprocessing removes rare items and short
sessions to a fixpoint and maps the surviving raw ids to dense internal
indices 1..m (index 0 is reserved for padding).

The serialized dataset bundle is a line-oriented text file:

    #contrarec-bundle v1
    #stats clicks=... train_sessions=... test_sessions=... items=... avg_length=...
    #dropped_test_sessions=...
    [vocabulary]
    <internal-index> <raw-id>        one line per retained item, index order
    [train]
    <item> <item> ... <label>        one session per line, label last
    [test]
    <item> <item> ... <label>

All indices in the session sections are internal indices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, EmptyDatasetError
from .rng import SeededRng

BUNDLE_MAGIC = "#contrarec-bundle v1"

STAT_FIELDS = ("clicks", "train_sessions", "test_sessions", "items", "avg_length")


@dataclass(frozen=True)
class Session:
    """An ordered item-index sequence plus the next item to predict."""

    items: tuple[int, ...]
    label: int

    def __post_init__(self):
        if len(self.items) < 1:
            raise ContractError("Session: needs at least one item")
        if 0 in self.items or self.label == 0:
            raise ContractError("Session: index 0 is reserved for padding")


class Vocabulary:
    """Bidirectional raw-item-id <-> dense internal index map (1..m)."""

    def __init__(self, raw_ids):
        self._raw = list(raw_ids)
        self._index = {raw: i + 1 for i, raw in enumerate(self._raw)}
        if len(self._index) != len(self._raw):
            raise ContractError("Vocabulary: duplicate raw ids")

    def __len__(self):
        return len(self._raw)

    @property
    def num_items(self) -> int:
        return len(self._raw)

    def __contains__(self, raw_id) -> bool:
        return raw_id in self._index

    def encode(self, raw_id) -> int:
        try:
            return self._index[raw_id]
        except KeyError:
            raise ContractError(f"Vocabulary: unknown raw item id {raw_id!r}") from None

    def decode(self, index: int):
        if not 1 <= index <= len(self._raw):
            raise ContractError(f"Vocabulary: internal index {index} out of range")
        return self._raw[index - 1]

    def raw_ids(self):
        return list(self._raw)

    def content_hash(self) -> str:
        blob = "\n".join(str(r) for r in self._raw).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Dataset:
    """Train/test sessions over one vocabulary."""

    train: list
    test: list
    vocabulary: Vocabulary
    dropped_test_sessions: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return self.vocabulary.num_items


# ---------------------------------------------------------------------------
# raw log loading


@dataclass(frozen=True)
class LogFormat:
    """Column mapping for a delimited session log."""

    delimiter: str = ","
    session_col: int = 0
    item_col: int = 1
    order_col: int = 2
    has_header: bool = False


@dataclass
class RawSession:
    session_id: int
    items: list
    last_order_key: int


@dataclass
class RawSessionLog:
    """Sessions grouped from a raw log, ordered oldest to newest."""

    sessions: list

    def __len__(self):
        return len(self.sessions)


def load_sessions(path, fmt: LogFormat = LogFormat()) -> RawSessionLog:
    """Parse a delimited log and group records into ordered sessions.

    Items within a session are sorted by order key, ties broken by file
    order; sessions are returned sorted by their final order key, so a
    "most recent" split is a suffix of the list.
    """
    path = Path(path)
    events = {}
    first_seen = {}
    n_lines = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            n_lines += 1
            if fmt.has_header and n_lines == 1:
                continue
            cols = line.split(fmt.delimiter)
            needed = max(fmt.session_col, fmt.item_col, fmt.order_col)
            if len(cols) <= needed:
                raise DataError(f"{path.name}: line {lineno}: expected at least "
                                f"{needed + 1} columns, got {len(cols)}")
            try:
                sid = int(cols[fmt.session_col])
                item = int(cols[fmt.item_col])
                order = int(cols[fmt.order_col])
            except ValueError:
                raise DataError(f"{path.name}: line {lineno}: could not parse "
                                f"record {line!r}") from None
            if sid not in events:
                events[sid] = []
                first_seen[sid] = lineno
            events[sid].append((order, lineno, item))
    if not events:
        raise EmptyDatasetError(f"{path.name}: no session records found")

    sessions = []
    for sid, rows in events.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        sessions.append(RawSession(session_id=sid,
                                   items=[r[2] for r in rows],
                                   last_order_key=rows[-1][0]))
    sessions.sort(key=lambda s: (s.last_order_key, first_seen[s.session_id]))
    return RawSessionLog(sessions=sessions)


def keep_recent_fraction(log: RawSessionLog, fraction: float) -> RawSessionLog:
    """Keep only the most recent ``fraction`` of sessions."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"keep_recent_fraction: fraction {fraction} outside (0, 1]")
    n_keep = max(1, int(round(fraction * len(log.sessions))))
    return RawSessionLog(sessions=log.sessions[-n_keep:])


def split_recent(log: RawSessionLog, test_fraction: float):
    """Split off the most recent sessions as the test portion."""
    if not 0.0 <= test_fraction < 1.0:
        raise ContractError(f"split_recent: test_fraction {test_fraction} outside [0, 1)")
    n_test = int(round(test_fraction * len(log.sessions)))
    cut = len(log.sessions) - n_test
    return (RawSessionLog(sessions=log.sessions[:cut]),
            RawSessionLog(sessions=log.sessions[cut:]))


# ---------------------------------------------------------------------------
# filtering and augmentation


def preprocess(log: RawSessionLog, min_item_count: int = 5, min_session_len: int = 2):
    """Filter rare items and short sessions to a fixpoint; index the rest.

    Alternates removing items whose global occurrence count falls below
    ``min_item_count`` and dropping sessions shorter than
    ``min_session_len`` until neither rule fires, which makes the result
    independent of which filter is applied first. Returns (sessions as
    lists of internal indices, Vocabulary).
    """
    if not log.sessions:
        raise EmptyDatasetError("preprocess: empty session log")
    sessions = [list(s.items) for s in log.sessions]
    while True:
        counts = {}
        for items in sessions:
            for item in items:
                counts[item] = counts.get(item, 0) + 1
        keep = {item for item, c in counts.items() if c >= min_item_count}
        filtered = []
        changed = False
        for items in sessions:
            kept = [i for i in items if i in keep]
            if len(kept) != len(items):
                changed = True
            if len(kept) >= min_session_len:
                filtered.append(kept)
            else:
                changed = True
        sessions = filtered
        if not changed:
            break
    if not sessions:
        raise EmptyDatasetError("preprocess: all sessions were filtered out")

    vocab_order = []
    seen = set()
    for items in sessions:
        for item in items:
            if item not in seen:
                seen.add(item)
                vocab_order.append(item)
    vocab = Vocabulary(vocab_order)
    return [[vocab.encode(i) for i in items] for items in sessions], vocab


def apply_vocabulary(log: RawSessionLog, vocab: Vocabulary, min_session_len: int = 2):
    """Map raw sessions through an existing vocabulary.

    Sessions containing any item absent from the vocabulary are dropped
    whole, as are sessions left shorter than ``min_session_len``.
    Returns (mapped sessions, dropped-for-unknown-items count).
    """
    kept = []
    dropped_unknown = 0
    for raw in log.sessions:
        if any(item not in vocab for item in raw.items):
            dropped_unknown += 1
            continue
        if len(raw.items) < min_session_len:
            continue
        kept.append([vocab.encode(i) for i in raw.items])
    return kept, dropped_unknown


def truncate_session(items, max_len: int):
    """Keep only the most recent ``max_len`` items."""
    if max_len < 1:
        raise ContractError(f"truncate_session: max_len {max_len} < 1")
    return list(items[-max_len:])


def augment(items) -> list:
    """Expand one sequence into its (prefix, next-item) training examples.

    [v1, ..., vn] yields ([v1], v2), ([v1, v2], v3), ...,
    ([v1..v_{n-1}], vn): exactly n - 1 sessions.
    """
    items = list(items)
    if len(items) < 2:
        raise ContractError(f"augment: need at least 2 items, got {len(items)}")
    return [Session(items=tuple(items[:k]), label=items[k]) for k in range(1, len(items))]


def prepare_dataset(log: RawSessionLog, *, min_item_count: int = 5,
                    min_session_len: int = 2, max_session_len: int = 50,
                    test_fraction: float = 0.1,
                    recent_fraction: float | None = None) -> Dataset:
    """Full raw-log pipeline: split, filter, index, truncate, augment."""
    if recent_fraction is not None:
        log = keep_recent_fraction(log, recent_fraction)
    train_log, test_log = split_recent(log, test_fraction)
    if not train_log.sessions:
        raise EmptyDatasetError("prepare_dataset: no training sessions after split")
    train_seqs, vocab = preprocess(train_log, min_item_count, min_session_len)
    test_seqs, dropped = apply_vocabulary(test_log, vocab, min_session_len)
    train_seqs = [truncate_session(s, max_session_len) for s in train_seqs]
    test_seqs = [truncate_session(s, max_session_len) for s in test_seqs]

    clicks = sum(len(s) for s in train_seqs) + sum(len(s) for s in test_seqs)
    n_seqs = len(train_seqs) + len(test_seqs)
    train = [ex for s in train_seqs for ex in augment(s)]
    test = [ex for s in test_seqs for ex in augment(s)]
    stats = {
        "clicks": clicks,
        "train_sessions": len(train),
        "test_sessions": len(test),
        "items": vocab.num_items,
        "avg_length": round(clicks / n_seqs, 4) if n_seqs else 0.0,
    }
    return Dataset(train=train, test=test, vocabulary=vocab,
                   dropped_test_sessions=dropped, stats=stats)


# ---------------------------------------------------------------------------
# synthetic data

# transition kernel: after the repeat branch, the remaining probability
# mass splits between the in-cluster ring successor, an in-cluster
# popularity draw, and a global popularity draw
RING_PROB = 0.60
CLUSTER_PROB = 0.25


def generate_synthetic(num_items: int, num_sessions: int, popularity_exponent: float,
                       last_item_collision_rate: float, seed: int, *,
                       min_session_len: int = 3, max_session_len: int = 8,
                       num_clusters: int = 2, in_cluster_prob: float = 0.85,
                       repeat_prob: float = 0.0, test_fraction: float = 0.2) -> Dataset:
    """Generate a clustered Markov dataset for desk-scale experiments.

    Items 1..num_items carry Zipf-like popularity weights
    i**(-popularity_exponent) and are striped into ``num_clusters``
    latent clusters. Each session picks a cluster, starts from an
    in-cluster popularity draw, and walks a kernel that mostly follows
    the cluster's ring structure. With probability
    ``last_item_collision_rate`` a session's final item is forced to the
    designated item (item 1) and its label is drawn from a small
    cluster-specific label set, so colliding sessions share a last item
    while their targets depend on the prefix's cluster. ``repeat_prob``
    routes draws (including the label) back to items already in the
    session, which produces repeat-heavy data.

    The same seed always yields the identical dataset.
    """
    if num_items < 5:
        raise ContractError(f"generate_synthetic: num_items {num_items} < 5")
    if num_sessions < 10:
        raise ContractError(f"generate_synthetic: num_sessions {num_sessions} < 10")
    for name, rate in (("last_item_collision_rate", last_item_collision_rate),
                       ("in_cluster_prob", in_cluster_prob),
                       ("repeat_prob", repeat_prob),
                       ("test_fraction", test_fraction)):
        if not 0.0 <= rate <= 1.0:
            raise ContractError(f"generate_synthetic: {name} {rate} outside [0, 1]")
    if not 1 <= min_session_len <= max_session_len:
        raise ContractError("generate_synthetic: bad session length range")
    if num_clusters < 1 or num_clusters > num_items:
        raise ContractError(f"generate_synthetic: bad num_clusters {num_clusters}")

    rng = SeededRng(seed).stream("synthetic-sessions")
    items_arr = np.arange(1, num_items + 1)
    weights = items_arr.astype(np.float64) ** (-popularity_exponent)
    weights /= weights.sum()

    members = [items_arr[(items_arr - 1) % num_clusters == c] for c in range(num_clusters)]
    member_pos = {}
    for c in range(num_clusters):
        for pos, item in enumerate(members[c]):
            member_pos[item] = (c, pos)
    cluster_weights = []
    for c in range(num_clusters):
        w = weights[members[c] - 1]
        cluster_weights.append(w / w.sum())

    designated = 1
    label_sets = []
    for c in range(num_clusters):
        pool = [i for i in members[c] if i != designated][:3]
        if not pool:
            pool = list(members[c][:1])
        probs = np.array([0.6, 0.3, 0.1][: len(pool)])
        label_sets.append((np.array(pool), probs / probs.sum()))

    def popularity_draw(cluster=None):
        if cluster is None:
            return int(rng.choice(items_arr, p=weights))
        return int(rng.choice(members[cluster], p=cluster_weights[cluster]))

    def next_item(history, cluster):
        u = rng.random()
        if u < repeat_prob:
            return int(history[rng.integers(len(history))])
        u = rng.random()
        if u < RING_PROB:
            c, pos = member_pos[history[-1]]
            ring = members[c]
            return int(ring[(pos + 1) % len(ring)])
        if u < RING_PROB + CLUSTER_PROB:
            return popularity_draw(cluster)
        if rng.random() < in_cluster_prob:
            return popularity_draw(cluster)
        return popularity_draw()

    sessions = []
    for _ in range(num_sessions):
        cluster = int(rng.integers(num_clusters))
        length = int(rng.integers(min_session_len, max_session_len + 1))
        items = [popularity_draw(cluster)]
        while len(items) < length:
            items.append(next_item(items, cluster))
        if rng.random() < last_item_collision_rate:
            items[-1] = designated
            pool, probs = label_sets[cluster]
            label = int(rng.choice(pool, p=probs))
        else:
            label = next_item(items, cluster)
        sessions.append(Session(items=tuple(items), label=label))

    n_test = int(round(test_fraction * num_sessions))
    cut = num_sessions - n_test
    train, test = sessions[:cut], sessions[cut:]
    vocab = Vocabulary(list(range(1, num_items + 1)))
    clicks = sum(len(s.items) + 1 for s in sessions)
    stats = {
        "clicks": clicks,
        "train_sessions": len(train),
        "test_sessions": len(test),
        "items": num_items,
        "avg_length": round(clicks / num_sessions, 4),
    }
    return Dataset(train=train, test=test, vocabulary=vocab, stats=stats)


# ---------------------------------------------------------------------------
# bundle serialization


def write_bundle(dataset: Dataset, path):
    """Write a dataset to the documented line-oriented bundle format."""
    path = Path(path)
    lines = [BUNDLE_MAGIC]
    if dataset.stats:
        parts = " ".join(f"{k}={dataset.stats[k]}" for k in STAT_FIELDS if k in dataset.stats)
        lines.append(f"#stats {parts}")
    lines.append(f"#dropped_test_sessions={dataset.dropped_test_sessions}")
    lines.append("[vocabulary]")
    for idx, raw in enumerate(dataset.vocabulary.raw_ids(), start=1):
        lines.append(f"{idx} {raw}")
    for section, sessions in (("[train]", dataset.train), ("[test]", dataset.test)):
        lines.append(section)
        for s in sessions:
            lines.append(" ".join(str(i) for i in (*s.items, s.label)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_bundle(path) -> Dataset:
    """Read a dataset bundle written by write_bundle."""
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0] != BUNDLE_MAGIC:
        raise DataError(f"{path.name}: not a contrarec bundle")
    stats = {}
    dropped = 0
    section = None
    raw_ids = []
    train, test = [], []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#stats "):
            for part in line[len("#stats "):].split():
                key, _, value = part.partition("=")
                stats[key] = float(value) if "." in value else int(value)
            continue
        if line.startswith("#dropped_test_sessions="):
            dropped = int(line.split("=", 1)[1])
            continue
        if line.startswith("#"):
            continue
        if line in ("[vocabulary]", "[train]", "[test]"):
            section = line
            continue
        try:
            if section == "[vocabulary]":
                idx_s, raw_s = line.split()
                if int(idx_s) != len(raw_ids) + 1:
                    raise ValueError("vocabulary indices out of order")
                raw_ids.append(int(raw_s))
            elif section in ("[train]", "[test]"):
                values = [int(v) for v in line.split()]
                if len(values) < 2:
                    raise ValueError("session line needs >= 2 indices")
                target = train if section == "[train]" else test
                target.append(Session(items=tuple(values[:-1]), label=values[-1]))
            else:
                raise ValueError("content before any section header")
        except (ValueError, ContractError) as exc:
            raise DataError(f"{path.name}: line {lineno}: {exc}") from None
    if not raw_ids:
        raise DataError(f"{path.name}: bundle has no vocabulary")
    return Dataset(train=train, test=test, vocabulary=Vocabulary(raw_ids),
                   dropped_test_sessions=dropped, stats=stats)


def bundle_fingerprint(path) -> str:
    """Content hash of a bundle file, used in run manifests."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
