"""Interaction corpora: file loaders, leave-one-out splitting, synthetic fixtures.

All ingest operations are pure and deterministic: re-running them on the same
input produces identical results.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

PADDING_ITEM = 0

FORMATS = ("ml1m", "steam", "tsv")

MIN_EVENTS_PER_USER = 3  # leave-one-out test item + >=2 train items


class CorpusFormatError(ValueError):
    """A corpus file line could not be parsed."""


class EmptyCorpusError(ValueError):
    """No usable users remain after filtering."""


@dataclass
class InteractionLog:
    """Timestamp-ordered implicit-feedback events, densely re-indexed.

    users: dense ids 1..N. items: dense ids 1..M (0 is reserved for padding
    and never appears in events). events[u] is sorted ascending by timestamp
    with file order as a stable tie-break.
    """

    users: list[int]
    items: list[int]
    events: dict[int, list[tuple[int, int]]]
    user_map: dict[str, int] = field(default_factory=dict)
    item_map: dict[str, int] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return sum(len(ev) for ev in self.events.values())


@dataclass
class ClientDataset:
    """One federated client: chronological history plus the held-out item."""

    user: int
    train_seq: list[int]
    test_item: int


def _parse_ml1m(lines) -> list[tuple[str, str, int]]:
    records = []
    for lineno, line in lines:
        parts = line.split("::")
        if len(parts) != 4:
            raise CorpusFormatError(
                f"line {lineno}: expected UserID::MovieID::Rating::Timestamp, got {line!r}"
            )
        try:
            ts = int(parts[3])
        except ValueError as exc:
            raise CorpusFormatError(f"line {lineno}: bad timestamp {parts[3]!r}") from exc
        records.append((parts[0], parts[1], ts))
    return records


def _parse_steam(lines) -> list[tuple[str, str, int]]:
    # Rows are user,game,behavior,value[,flag]; game titles may themselves
    # contain commas, so the behavior column is located from the right.
    records = []
    for lineno, line in lines:
        row = next(csv.reader([line]))
        if len(row) < 4:
            raise CorpusFormatError(f"line {lineno}: expected >=4 CSV fields, got {line!r}")
        behavior_idx = None
        for j in range(len(row) - 1, 0, -1):
            if row[j] in ("play", "purchase"):
                behavior_idx = j
                break
        if behavior_idx is None or behavior_idx < 2:
            raise CorpusFormatError(f"line {lineno}: no play/purchase behavior field in {line!r}")
        if row[behavior_idx] != "play":
            continue
        game = ",".join(row[1:behavior_idx])
        # no timestamps in this corpus; file order is chronological order
        records.append((row[0], game, lineno))
    return records


def _parse_tsv(lines) -> list[tuple[str, str, int]]:
    records = []
    for lineno, line in lines:
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusFormatError(f"line {lineno}: expected user<TAB>item<TAB>timestamp, got {line!r}")
        try:
            ts = int(parts[2])
        except ValueError as exc:
            raise CorpusFormatError(f"line {lineno}: bad timestamp {parts[2]!r}") from exc
        records.append((parts[0], parts[1], ts))
    return records


_PARSERS = {"ml1m": _parse_ml1m, "steam": _parse_steam, "tsv": _parse_tsv}


def load_interactions(path: str | Path, fmt: str) -> InteractionLog:
    """Load a corpus file and return a densely re-indexed InteractionLog.

    Users with fewer than MIN_EVENTS_PER_USER events are dropped. Dense ids
    are assigned in order of first appearance in the (filtered) file.
    """
    if fmt not in _PARSERS:
        raise ValueError(f"unknown corpus format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        lines = [
            (lineno, line.rstrip("\n").rstrip("\r"))
            for lineno, line in enumerate(fh, start=1)
        ]
    lines = [(n, s) for n, s in lines if s.strip()]
    records = _PARSERS[fmt](lines)

    by_user: dict[str, list[tuple[str, int, int]]] = {}
    user_order: list[str] = []
    for order, (user_tok, item_tok, ts) in enumerate(records):
        if user_tok not in by_user:
            by_user[user_tok] = []
            user_order.append(user_tok)
        by_user[user_tok].append((item_tok, ts, order))

    kept = [u for u in user_order if len(by_user[u]) >= MIN_EVENTS_PER_USER]
    if not kept:
        raise EmptyCorpusError(
            f"no users with >= {MIN_EVENTS_PER_USER} interactions in {path}"
        )

    user_map = {tok: i + 1 for i, tok in enumerate(kept)}
    item_map: dict[str, int] = {}
    for tok in kept:
        for item_tok, _, _ in by_user[tok]:
            if item_tok not in item_map:
                item_map[item_tok] = len(item_map) + 1

    events: dict[int, list[tuple[int, int]]] = {}
    for tok in kept:
        evs = sorted(by_user[tok], key=lambda e: (e[1], e[2]))
        events[user_map[tok]] = [(item_map[item_tok], ts) for item_tok, ts, _ in evs]

    return InteractionLog(
        users=list(range(1, len(kept) + 1)),
        items=list(range(1, len(item_map) + 1)),
        events=events,
        user_map=user_map,
        item_map=item_map,
    )


def write_id_maps(log: InteractionLog, out_dir: str | Path) -> tuple[Path, Path]:
    """Persist the original->dense id maps as two-column TSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    user_path = out_dir / "user_map.tsv"
    item_path = out_dir / "item_map.tsv"
    for mapping, dest in ((log.user_map, user_path), (log.item_map, item_path)):
        with dest.open("w", encoding="utf-8") as fh:
            for orig, dense in mapping.items():
                fh.write(f"{orig}\t{dense}\n")
    return user_path, item_path


def leave_one_out_split(log: InteractionLog, max_len: int) -> list[ClientDataset]:
    """Per user: last event is the test item, all earlier events the train
    sequence, truncated to the most recent max_len items."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    clients = []
    for user in log.users:
        items = [item for item, _ in log.events[user]]
        train = items[:-1][-max_len:]
        clients.append(ClientDataset(user=user, train_seq=train, test_item=items[-1]))
    return clients


def generate_synthetic(
    n_users: int, n_items: int, seq_len: int, seed: int
) -> InteractionLog:
    """Clustered synthetic corpus with learnable structure.

    Items split into a hot zone (partitioned into per-cluster pools) and a
    cold tail (~10% of the catalog) that never appears in any sequence; cold
    items make natural targets for promotion attacks. Each user belongs to
    one cluster and draws ~90% of events from its pool, the rest uniformly
    from the hot zone. Timestamps are the event index.
    """
    if n_users < 10 or n_items < 10 or seq_len < 3:
        raise ValueError("need n_users >= 10, n_items >= 10, seq_len >= 3")
    rng = stream(seed, "synthetic")

    n_cold = max(1, n_items // 10)
    hot = np.arange(1, n_items - n_cold + 1)
    # pools of >= ~20 items keep each user's top-K competition dominated by
    # well-trained in-cluster items rather than cross-cluster noise
    n_clusters = max(2, min(5, len(hot) // 20))
    pools = np.array_split(hot, n_clusters)

    events: dict[int, list[tuple[int, int]]] = {}
    for user in range(1, n_users + 1):
        pool = pools[(user - 1) % n_clusters]
        seq = []
        for t in range(seq_len):
            source = pool if rng.random() < 0.9 else hot
            seq.append((int(rng.choice(source)), t))
        events[user] = seq

    return InteractionLog(
        users=list(range(1, n_users + 1)),
        items=list(range(1, n_items + 1)),
        events=events,
        user_map={str(u): u for u in range(1, n_users + 1)},
        item_map={str(i): i for i in range(1, n_items + 1)},
    )


def synthetic_cluster_of(user: int, n_items: int) -> int:
    """Cluster index the generator assigned to this user (for tests/analysis)."""
    return (user - 1) % len(synthetic_pools(n_items))


def synthetic_pools(n_items: int) -> list[np.ndarray]:
    """Per-cluster item pools used by generate_synthetic for this catalog size."""
    n_cold = max(1, n_items // 10)
    hot = np.arange(1, n_items - n_cold + 1)
    n_clusters = max(2, min(5, len(hot) // 20))
    return np.array_split(hot, n_clusters)
