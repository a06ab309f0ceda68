"""Session-log ingestion, preprocessing, prefix augmentation and synthetic data."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REQUIRED_COLUMNS = ("session_id", "item_id", "timestamp")
DAY = 86400


class DataFormatError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class ClickEvent:
    session_id: str
    item_id: str
    timestamp: int


@dataclass
class Dataset:
    """Sessions as dense item indices plus the vocabulary that produced them."""

    vocab: dict[str, int]
    sessions: list[list[int]]
    split: str = "train"
    session_ids: list[str] | None = None
    end_times: list[int] | None = None

    def __post_init__(self):
        if self.session_ids is None:
            self.session_ids = [str(i) for i in range(len(self.sessions))]

    @property
    def items(self) -> list[str]:
        """Item ids ordered by index."""
        out = [""] * len(self.vocab)
        for item, i in self.vocab.items():
            out[i] = item
        return out

    @property
    def n_items(self) -> int:
        return len(self.vocab)

    def __len__(self) -> int:
        return len(self.sessions)

    def to_raw(self) -> list[list[ClickEvent]]:
        """Back to click events; positions become timestamps when no end times are known."""
        items = self.items
        raw = []
        for j, sess in enumerate(self.sessions):
            end = self.end_times[j] if self.end_times is not None else len(sess) - 1
            start = end - len(sess) + 1
            sid = self.session_ids[j]
            raw.append([ClickEvent(sid, items[v], start + t) for t, v in enumerate(sess)])
        return raw


@dataclass(frozen=True)
class TrainingExample:
    input: tuple[int, ...]
    target: int


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def load_sessions(path, format: str = "csv") -> list[list[ClickEvent]]:  # noqa: A002
    """Read click events grouped by session, each group sorted by timestamp.

    Groups appear in order of each session's first row; equal timestamps keep
    file order.
    """
    if format not in ("csv", "tsv"):
        raise DataFormatError(f"unknown format {format!r}; expected csv or tsv")
    delimiter = "," if format == "csv" else "\t"
    groups: dict[str, list[tuple[int, int, ClickEvent]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataFormatError(f"missing column {col!r} in {path}")
        sc, ic, tc = (header.index(c) for c in REQUIRED_COLUMNS)
        for order, row in enumerate(reader):
            line = order + 2
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                sid, item, raw_ts = row[sc].strip(), row[ic].strip(), row[tc].strip()
            except IndexError:
                raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}") from None
            try:
                ts = int(raw_ts)
            except ValueError:
                try:
                    ts = int(float(raw_ts))
                except ValueError:
                    raise DataFormatError(f"line {line}: unparseable timestamp {raw_ts!r}") from None
            if not item:
                raise DataFormatError(f"line {line}: empty item_id")
            groups.setdefault(sid, []).append((ts, order, ClickEvent(sid, item, ts)))
    return [[ev for _, _, ev in sorted(g, key=lambda x: (x[0], x[1]))] for g in groups.values()]


def write_sessions(path, raw: Iterable[Sequence[ClickEvent]], format: str = "csv") -> None:  # noqa: A002
    delimiter = "," if format == "csv" else "\t"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for group in raw:
            for ev in group:
                w.writerow((ev.session_id, ev.item_id, ev.timestamp))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _filter_once(raw, min_len, min_item_count):
    counts = Counter(ev.item_id for sess in raw for ev in sess)
    out = []
    for sess in raw:
        kept = [ev for ev in sess if counts[ev.item_id] >= min_item_count]
        if len(kept) >= min_len:
            out.append(kept)
    return out


def preprocess(
    raw_sessions: Sequence[Sequence[ClickEvent]],
    min_len: int = 2,
    min_item_count: int = 5,
    max_len: int | None = 50,
    until_stable: bool = True,
) -> Dataset:
    """Filter rare items and short sessions, then index the surviving items.

    Sessions longer than ``max_len`` keep their last ``max_len`` clicks. One
    filtering pass drops items seen fewer than ``min_item_count`` times and
    then sessions shorter than ``min_len``. Dropping sessions can push other
    items under the threshold, so by default passes repeat until nothing
    changes; ``until_stable=False`` gives the single-pass protocol.
    """
    if not raw_sessions:
        raise EmptyDatasetError("no sessions to preprocess")
    raw = [list(s)[-max_len:] if max_len else list(s) for s in raw_sessions]
    while True:
        filtered = _filter_once(raw, min_len, min_item_count)
        stable = sum(map(len, filtered)) == sum(map(len, raw))
        raw = filtered
        if stable or not until_stable:
            break
    if not raw:
        raise EmptyDatasetError(
            f"all sessions filtered out (min_len={min_len}, min_item_count={min_item_count})"
        )
    vocab: dict[str, int] = {}
    for sess in raw:
        for ev in sess:
            vocab.setdefault(ev.item_id, len(vocab))
    return Dataset(
        vocab=vocab,
        sessions=[[vocab[ev.item_id] for ev in s] for s in raw],
        session_ids=[s[0].session_id for s in raw],
        end_times=[s[-1].timestamp for s in raw],
    )


def encode_sessions(dataset: Dataset, vocab: dict[str, int], drop_unknown: bool = False, min_len: int = 2) -> Dataset:
    """Re-index ``dataset`` under another vocabulary.

    Unknown items raise unless ``drop_unknown``; dropping re-applies the length filter.
    """
    items = dataset.items
    unknown = sorted({items[v] for s in dataset.sessions for v in s} - vocab.keys())
    if unknown and not drop_unknown:
        shown = ", ".join(unknown[:20]) + (" ..." if len(unknown) > 20 else "")
        raise KeyError(f"{len(unknown)} items not in the model vocabulary: {shown}")
    sessions, ids, ends = [], [], []
    for j, s in enumerate(dataset.sessions):
        mapped = [vocab[items[v]] for v in s if items[v] in vocab]
        if len(mapped) >= min_len:
            sessions.append(mapped)
            ids.append(dataset.session_ids[j])
            if dataset.end_times is not None:
                ends.append(dataset.end_times[j])
    return Dataset(dict(vocab), sessions, dataset.split, ids, ends if dataset.end_times is not None else None)


def _subset(dataset: Dataset, keep: Sequence[int], split: str) -> Dataset:
    return Dataset(
        vocab=dataset.vocab,
        sessions=[dataset.sessions[j] for j in keep],
        split=split,
        session_ids=[dataset.session_ids[j] for j in keep],
        end_times=[dataset.end_times[j] for j in keep] if dataset.end_times is not None else None,
    )


def split_by_time(dataset: Dataset, holdout_span: int, min_len: int = 2) -> tuple[Dataset, Dataset]:
    """Sessions ending after ``max_end - holdout_span`` become the test partition.

    The train partition gets a fresh contiguous vocabulary; test sessions are
    re-indexed under it with unseen items removed and the length filter
    re-applied.
    """
    if dataset.end_times is None:
        raise SplitError("dataset carries no session end times")
    cut = max(dataset.end_times) - holdout_span
    train_idx = [j for j, t in enumerate(dataset.end_times) if t <= cut]
    test_idx = [j for j, t in enumerate(dataset.end_times) if t > cut]
    if not train_idx or not test_idx:
        raise SplitError(f"split leaves {len(train_idx)} train and {len(test_idx)} test sessions")
    old_items = dataset.items
    vocab: dict[str, int] = {}
    for j in train_idx:
        for v in dataset.sessions[j]:
            vocab.setdefault(old_items[v], len(vocab))
    train = encode_sessions(_subset(dataset, train_idx, "train"), vocab)
    test = encode_sessions(_subset(dataset, test_idx, "test"), vocab, drop_unknown=True, min_len=min_len)
    if not test.sessions:
        raise SplitError("no test session survives the vocabulary closure")
    return train, test


def take_recent_fraction(dataset: Dataset, fraction: float) -> Dataset:
    """Keep the ``fraction`` of sessions with the latest end times (ties by position)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if dataset.end_times is None:
        raise SplitError("dataset carries no session end times")
    n = max(1, int(math.ceil(len(dataset) * fraction)))
    order = sorted(range(len(dataset)), key=lambda j: (dataset.end_times[j], j))
    keep = sorted(order[-n:])
    sub = _subset(dataset, keep, dataset.split)
    return preprocess(sub.to_raw(), min_len=2, min_item_count=1, max_len=None)


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------


def augment_prefixes(session: Sequence[int]) -> list[TrainingExample]:
    """Every proper prefix of ``session`` paired with the item that follows it."""
    if len(session) < 2:
        raise ValueError(f"prefix augmentation needs a session of length >= 2, got {len(session)}")
    s = tuple(int(v) for v in session)
    return [TrainingExample(s[:t], s[t]) for t in range(1, len(s))]


def dataset_examples(dataset: Dataset) -> list[TrainingExample]:
    return [ex for s in dataset.sessions for ex in augment_prefixes(s)]


# ---------------------------------------------------------------------------
# synthetic preference drift
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_items: int = 60
    n_sessions: int = 500
    n_preference_clusters: int = 6
    items_per_cluster: int = 10
    drift_probability: float = 0.3
    min_session_len: int = 4
    max_session_len: int = 12
    seed: int = 0
    n_test_sessions: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_preference_clusters < 3:
            problems.append("n_preference_clusters must be >= 3")
        if self.items_per_cluster < 1:
            problems.append("items_per_cluster must be >= 1")
        if self.n_items != self.n_preference_clusters * self.items_per_cluster:
            problems.append("n_items must equal n_preference_clusters * items_per_cluster")
        if not 0.0 <= self.drift_probability <= 1.0:
            problems.append("drift_probability must lie in [0, 1]")
        if not 2 <= self.min_session_len <= self.max_session_len <= 50:
            problems.append("need 2 <= min_session_len <= max_session_len <= 50")
        if self.n_sessions < 1:
            problems.append("n_sessions must be >= 1")
        if not 0 <= self.n_test_sessions < self.n_sessions:
            problems.append("n_test_sessions must lie in [0, n_sessions)")
        if problems:
            raise ValueError("invalid synthetic spec: " + "; ".join(problems))


@dataclass
class SyntheticData:
    dataset: Dataset
    spec: SyntheticSpec
    cluster_of_item: list[int]
    successor: list[int]
    cluster_traces: list[list[int]] = field(repr=False)
    drift_flags: list[list[bool]] = field(repr=False)

    def metadata_lines(self) -> list[str]:
        lines = [f"spec.{k}={v}" for k, v in asdict(self.spec).items()]
        lines += [f"successor.{c}={s}" for c, s in enumerate(self.successor)]
        items = self.dataset.items
        lines += [f"cluster.{items[i]}={c}" for i, c in enumerate(self.cluster_of_item)]
        return lines


def gen_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Sessions driven by a latent preference cluster with drift excursions.

    Items of cluster ``c`` are the contiguous block ``[c*m, (c+1)*m)`` and each
    click is uniform over the current cluster. Every transition drifts with
    ``drift_probability``: the pointer leaves for a random cluster other than
    the current one and other than where it would otherwise go. Without a
    drift the pointer stays on its anchor cluster, except right after an
    excursion, when it moves to ``successor[anchor]``, a fixed cyclic map of
    the pre-drift cluster. So after a drift the informative cluster is the one
    seen before the drift, not the last click.

    The final ``n_test_sessions`` sessions are stamped one day after the rest,
    so a one-day ``split_by_time`` separates them exactly.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, m = spec.n_preference_clusters, spec.items_per_cluster
    cycle = rng.permutation(C)
    successor = [0] * C
    for i in range(C):
        successor[int(cycle[i])] = int(cycle[(i + 1) % C])
    cluster_of_item = [i // m for i in range(spec.n_items)]

    sessions, traces, flags = [], [], []
    for _ in range(spec.n_sessions):
        length = int(rng.integers(spec.min_session_len, spec.max_session_len + 1))
        anchor = int(rng.integers(C))
        current, excursion = anchor, False
        trace, drift = [current], []
        for _ in range(length - 1):
            expected = successor[anchor] if excursion else anchor
            if rng.random() < spec.drift_probability:
                choices = [c for c in range(C) if c != current and c != expected]
                current = int(choices[rng.integers(len(choices))])
                excursion = True
                drift.append(True)
            else:
                anchor = current = expected
                excursion = False
                drift.append(False)
            trace.append(current)
        sessions.append([c * m + int(rng.integers(m)) for c in trace])
        traces.append(trace)
        flags.append(drift)

    n_train = spec.n_sessions - spec.n_test_sessions
    stride = 100
    test_day = (n_train * stride // DAY + 2) * DAY
    end_times, base = [], 0
    for j, s in enumerate(sessions):
        base = j * stride if j < n_train else test_day + (j - n_train) * 10
        end_times.append(base + len(s) - 1)
    vocab = {f"i{i}": i for i in range(spec.n_items)}
    ds = Dataset(vocab, sessions, "train", [f"s{j}" for j in range(len(sessions))], end_times)
    return SyntheticData(ds, spec, cluster_of_item, successor, traces, flags)


def write_synthetic(data: SyntheticData, path) -> Path:
    """Write sessions as CSV plus a ``<path>.meta`` key=value sidecar. Returns the sidecar path."""
    path = Path(path)
    write_sessions(path, data.dataset.to_raw(), "csv")
    meta = path.with_name(path.name + ".meta")
    meta.write_text("\n".join(data.metadata_lines()) + "\n", encoding="utf-8")
    return meta


def read_metadata(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def gen_memorization(n_sessions: int = 50, n_items: int = 30, seed: int = 0, min_len: int = 3, max_len: int = 6) -> Dataset:
    """Sessions that walk a fixed cyclic successor map, so every prefix has one answer."""
    rng = np.random.default_rng(seed)
    cycle = rng.permutation(n_items)
    nxt = np.empty(n_items, dtype=np.int64)
    nxt[cycle] = np.roll(cycle, -1)
    sessions = []
    for _ in range(n_sessions):
        v = int(rng.integers(n_items))
        s = [v]
        for _ in range(int(rng.integers(min_len, max_len + 1)) - 1):
            v = int(nxt[v])
            s.append(v)
        sessions.append(s)
    vocab = {f"i{i}": i for i in range(n_items)}
    return Dataset(vocab, sessions, "train", None, [j * 100 + len(s) for j, s in enumerate(sessions)])


def with_split(dataset: Dataset, split: str) -> Dataset:
    return replace(dataset, split=split)
