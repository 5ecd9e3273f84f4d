"""Seeded synthetic catalogs and interaction logs.

Items are drawn around a 3-level hierarchy of latent topics. Titles,
frame captions and thumbnails mention the topic words so cluster
descriptions come out readable. Interaction logs mix same-topic,
sibling-topic and random transitions, with sibling transitions satisfying
users more often.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import InteractionLog, InteractionRecord, Item, ItemCatalog

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
FILLER = ["clip", "moments", "guide", "story", "tips", "highlights", "session", "diary",
          "challenge", "review", "basics", "journey"]


def pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    """`n` distinct pronounceable words of two or three syllables."""
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in seen and w not in FILLER:
            seen.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticWorld:
    catalog: ItemCatalog
    topic_of: dict[str, tuple[int, ...]]
    topic_words: dict[tuple[int, ...], str]
    members: dict[tuple[int, ...], list[str]] = field(default_factory=dict)

    def leaf_topics(self) -> list[tuple[int, ...]]:
        return sorted(self.members)


def generate_catalog(n_items: int = 2000, dimension: int = 32,
                     branching: Sequence[int] = (4, 4, 4), seed: int = 0,
                     traffic_sigma: float = 0.8, noise: float = 0.35) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    scales = [3.0, 2.0, 1.3][: len(branching)]
    paths: list[tuple[int, ...]] = [()]
    for b in branching:
        paths = [p + (j,) for p in paths for j in range(b)]
    prefixes = sorted({p[:d] for p in paths for d in range(1, len(branching) + 1)})
    words = dict(zip(prefixes, pseudo_words(len(prefixes), rng)))
    directions = {p: rng.normal(size=dimension) / np.sqrt(dimension) for p in prefixes}

    items = []
    topic_of = {}
    width = len(str(n_items - 1))
    order = rng.permutation(n_items)
    for i in range(n_items):
        leaf = paths[int(order[i]) % len(paths)]
        vec = sum(scales[d] * directions[leaf[: d + 1]] for d in range(len(leaf)))
        vec = vec + noise * rng.normal(size=dimension) / np.sqrt(dimension) * 3.0
        terms = [words[leaf[: d + 1]] for d in range(len(leaf)) if rng.random() < 0.9]
        terms.append(FILLER[rng.integers(len(FILLER))])
        n_frames = int(rng.choice([0, 1, 3, 4, 6, 8, 10, 12], p=[.03, .05, .1, .2, .2, .2, .12, .1]))
        leaf_word = words[leaf]
        frames = [f"frame {f}: {leaf_word} scene, {FILLER[rng.integers(len(FILLER))]}"
                  for f in range(n_frames)]
        thumb = f"thumbnail: {leaf_word} {words[leaf[:1]]}" if rng.random() < 0.8 else None
        item_id = f"v{i:0{width}d}"
        items.append(Item(
            item_id=item_id,
            title=" ".join(terms),
            topic_vector=vec,
            traffic_weight=float(np.round(100 * rng.lognormal(0.0, traffic_sigma), 3)),
            frame_captions=frames,
            thumbnail_caption=thumb,
            visually_interesting_score=float(np.round(rng.beta(2, 2), 4)),
        ))
        topic_of[item_id] = leaf
    catalog = ItemCatalog.from_items(items, dimension)
    members: dict[tuple[int, ...], list[str]] = {p: [] for p in paths}
    for item_id, leaf in topic_of.items():
        members[leaf].append(item_id)
    members = {p: m for p, m in members.items() if m}
    return SyntheticWorld(catalog, topic_of, words, members)


def generate_interactions(world: SyntheticWorld, n_events: int = 20_000, n_users: int = 300,
                          seed: int = 0, p_same: float = 0.55, p_sibling: float = 0.3,
                          satisfaction: tuple[float, float, float] = (0.35, 0.6, 0.2),
                          continue_prob: float = 0.7, start: int = 1_700_000_000,
                          span_days: float = 30.0) -> InteractionLog:
    """Transition log over `world`.

    Each event picks the next item from the context's own leaf topic
    (`p_same`), a sibling leaf topic (`p_sibling`) or anywhere, weighted by
    traffic. `satisfaction` gives the positive probability for the three
    cases in that order.
    """
    rng = np.random.default_rng(seed)
    cat = world.catalog
    leaves = world.leaf_topics()
    weight = {p: cat.weights(world.members[p]) for p in leaves}
    siblings = {p: [q for q in leaves if q[:-1] == p[:-1] and q != p] for p in leaves}
    all_ids = cat.ids
    all_w = cat.weights()
    all_w = all_w / all_w.sum()

    def pick(topic: tuple[int, ...]) -> str:
        w = weight[topic]
        return world.members[topic][int(rng.choice(len(w), p=w / w.sum()))]

    users = [f"u{u:04d}" for u in range(n_users)]
    prefs = {u: [leaves[j] for j in rng.choice(len(leaves), size=3, replace=False)]
             for u in users}
    clock = {u: start + int(rng.integers(0, int(span_days * 86400 * 0.5))) for u in users}
    last: dict[str, str] = {}
    records = []
    for _ in range(n_events):
        u = users[int(rng.integers(n_users))]
        if u in last and rng.random() < continue_prob:
            ctx = last[u]
        else:
            ctx = pick(prefs[u][int(rng.integers(3))])
        topic = world.topic_of[ctx]
        r = rng.random()
        if r < p_same:
            nxt, p_sat = pick(topic), satisfaction[0]
        elif r < p_same + p_sibling and siblings[topic]:
            sib = siblings[topic][int(rng.integers(len(siblings[topic])))]
            nxt, p_sat = pick(sib), satisfaction[1]
        else:
            nxt, p_sat = all_ids[int(rng.choice(len(all_ids), p=all_w))], satisfaction[2]
        clock[u] += int(rng.integers(20, 600))
        records.append(InteractionRecord(u, ctx, nxt, bool(rng.random() < p_sat), clock[u]))
        last[u] = nxt
    log = InteractionLog(records)
    log.ingest_stats.accepted = len(records)
    return log
