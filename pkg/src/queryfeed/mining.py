"""Positive-pair construction from raw event logs.

View-buy pairs come from converting sessions (every distinct viewed item
against every item bought in that session); buy-buy pairs from ordered
purchase pairs within a time horizon. Both are ranked by a co-occurrence
cosine: count(q,t) / sqrt(count(q) * count(t)), with the marginals taken
over the candidate multiset itself (occurrences in the query role and in
the target role respectively).
"""

from __future__ import annotations

import numpy as np
from collections import Counter, defaultdict
from dataclasses import dataclass

VALID_EVENT_TYPES = ("view", "buy")

SECONDS_PER_DAY = 86_400


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    customer_id: str
    item_id: str
    event_type: str
    timestamp: int
    session_id: str = ""

    def __post_init__(self):
        if self.event_type not in VALID_EVENT_TYPES:
            raise MiningError(f"bad event_type {self.event_type!r}")
        if self.timestamp < 0:
            raise MiningError("negative timestamp")


@dataclass(frozen=True)
class QueryTargetPair:
    query_id: str
    relation: str
    target_id: str
    count: int
    association: float


def _rank_candidates(pair_counts: Counter, relation: str, top_n: int, min_count: int) -> list[QueryTargetPair]:
    q_totals = Counter()
    t_totals = Counter()
    for (q, t), c in pair_counts.items():
        q_totals[q] += c
        t_totals[t] += c
    out = []
    for (q, t), c in pair_counts.items():
        if c < min_count:
            continue
        assoc = c / np.sqrt(q_totals[q] * t_totals[t])
        out.append(QueryTargetPair(q, relation, t, c, float(assoc)))
    out.sort(key=lambda p: (-p.association, -p.count, p.query_id, p.target_id))
    return out[:top_n]


def mine_view_buy(events: list[Event], top_n: int = 100_000, min_count: int = 2) -> list[QueryTargetPair]:
    """Pairs (viewed item -> bought item) from sessions that converted."""
    sessions: dict[tuple[str, str], tuple[set, set]] = defaultdict(lambda: (set(), set()))
    for ev in events:
        views, buys = sessions[(ev.customer_id, ev.session_id)]
        (views if ev.event_type == "view" else buys).add(ev.item_id)
    pair_counts: Counter = Counter()
    for views, buys in sessions.values():
        if not buys:
            continue
        for b in buys:
            for v in views:
                if v != b:
                    pair_counts[(v, b)] += 1
    return _rank_candidates(pair_counts, "view", top_n, min_count)


def mine_buy_buy(events: list[Event], horizon_days: int = 90, top_n: int = 100_000, min_count: int = 2) -> list[QueryTargetPair]:
    """Pairs (earlier purchase -> later purchase) within the horizon.

    Same-timestamp purchases are excluded: the relation stays asymmetric.
    """
    horizon = horizon_days * SECONDS_PER_DAY
    purchases: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for ev in events:
        if ev.event_type == "buy":
            purchases[ev.customer_id].append((ev.timestamp, ev.item_id))
    pair_counts: Counter = Counter()
    for buys in purchases.values():
        buys.sort()
        for i, (t1, a) in enumerate(buys):
            for t2, b in buys[i + 1:]:
                if t2 - t1 > horizon:
                    break
                if t2 > t1 and a != b:
                    pair_counts[(a, b)] += 1
    return _rank_candidates(pair_counts, "buy", top_n, min_count)


def sample_negative_items(catalog_ids, k: int, seed: int) -> list[str]:
    """k distinct uniform draws from the catalog, order-independent of input."""
    ids = sorted(catalog_ids)
    if k > len(ids):
        raise MiningError(f"cannot sample {k} from catalog of {len(ids)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in chosen]


# ----------------------------------------------------------------------
# file io


def write_events(path, events: list[Event], meta: dict | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append("customer_id,item_id,event_type,timestamp,session_id")
    for ev in events:
        lines.append(f"{ev.customer_id},{ev.item_id},{ev.event_type},{ev.timestamp},{ev.session_id}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_events(path) -> list[Event]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("customer_id,"):
                continue
            cust, item, etype, ts, sess = line.split(",")
            out.append(Event(cust, item, etype, int(ts), sess))
    return out


def write_pairs(path, pairs: list[QueryTargetPair], meta: dict | None = None) -> None:
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append("query_id,relation,target_id,count,association")
    for p in pairs:
        lines.append(f"{p.query_id},{p.relation},{p.target_id},{p.count},{p.association:.9f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pairs(path) -> list[QueryTargetPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("query_id,"):
                continue
            q, r, t, c, a = line.split(",")
            out.append(QueryTargetPair(q, r, t, int(c), float(a)))
    return out
