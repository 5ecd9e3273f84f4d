"""Item retrieval: restricted to a planned cluster, or unrestricted (exploit).

Both modes score candidates with a recency-decayed co-occurrence count
from the context item plus a small popularity prior.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .batchinfer import PlanCache
from .clustertree import ClusterTree
from .corpus import InteractionLog, ItemCatalog

DAY = 86_400.0
DEFAULT_DECAY = math.log(2) / 7.0  # per day: one-week half-life
DEFAULT_BETA = 0.1


class Source(str, enum.Enum):
    SERENDIP = "serendip"
    EXPLOIT = "exploit"


class NoPlanError(LookupError):
    """The context item has no resolved plan in the cache."""


@dataclass
class CooccurrenceModel:
    transition_counts: dict[str, dict[str, float]]
    popularity_prior: dict[str, float]
    trained_at: int
    decay: float = DEFAULT_DECAY
    _ids: list[str] = field(default_factory=list, repr=False)
    _prior: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    _pos: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._ids = sorted(self.popularity_prior)
        self._pos = {i: n for n, i in enumerate(self._ids)}
        self._prior = np.array([self.popularity_prior[i] for i in self._ids])

    def score(self, context: str, item: str, beta: float = DEFAULT_BETA) -> float:
        return (self.transition_counts.get(context, {}).get(item, 0.0)
                + beta * self.popularity_prior.get(item, 0.0))


def train_cooccurrence(log: InteractionLog, catalog: ItemCatalog,
                       decay: float = DEFAULT_DECAY) -> CooccurrenceModel:
    """Decayed transition counts; `decay` is per day, relative to the newest record.

    Self-transitions are ignored. The popularity prior is traffic weight
    divided by the catalog maximum.
    """
    if len(log) == 0:
        raise ValueError("cannot train on an empty log")
    trained_at = max(r.timestamp for r in log)
    counts: dict[str, dict[str, float]] = defaultdict(dict)
    for r in log:
        if r.context_item_id == r.next_item_id:
            continue
        age_days = (trained_at - r.timestamp) / DAY
        row = counts[r.context_item_id]
        row[r.next_item_id] = row.get(r.next_item_id, 0.0) + math.exp(-decay * age_days)
    top = max((it.traffic_weight for it in catalog), default=0.0)
    prior = {it.item_id: (it.traffic_weight / top if top > 0 else 0.0) for it in catalog}
    return CooccurrenceModel(dict(counts), prior, trained_at, decay)


@dataclass(frozen=True)
class Recommendation:
    item_id: str
    score: float
    source: Source


@dataclass
class Retrieval:
    """Ranked recommendations plus the plan that produced them."""

    recommendations: list[Recommendation]
    context: str
    planned_cluster: Optional[str] = None
    description: Optional[str] = None
    warning: Optional[str] = None

    def __iter__(self) -> Iterator[Recommendation]:
        return iter(self.recommendations)

    def __len__(self) -> int:
        return len(self.recommendations)

    @property
    def item_ids(self) -> list[str]:
        return [r.item_id for r in self.recommendations]

    def to_dict(self) -> dict:
        return {
            "context": self.context,
            "planned_cluster": self.planned_cluster,
            "description": self.description,
            "warning": self.warning,
            "recommendations": [{"item_id": r.item_id, "score": r.score, "source": r.source.value}
                                for r in self.recommendations],
        }


def rank_candidates(model: CooccurrenceModel, context: str, candidates: list[str], k: int,
                    beta: float, source: Source) -> list[Recommendation]:
    """Score `candidates` for `context` and keep the top `k` (context excluded)."""
    row = model.transition_counts.get(context, {})
    scored = [(row.get(c, 0.0) + beta * model.popularity_prior.get(c, 0.0), c)
              for c in candidates if c != context]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [Recommendation(c, s, source) for s, c in scored[:k]]


def recommend_restricted(model: CooccurrenceModel, tree: ClusterTree, cache: PlanCache,
                         context: str, k: int = 20, beta: float = DEFAULT_BETA) -> Retrieval:
    """Top-`k` items inside the cluster planned for `context`.

    Raises:
        NoPlanError: `context` has no cache entry with a resolved cluster.
    """
    plan = cache.entries.get(context)
    if plan is None or plan.resolved_cluster is None:
        raise NoPlanError(context)
    cluster = plan.resolved_cluster
    node = tree.nodes[cluster]
    members = node.members
    warning = None
    if not members or members == [context]:
        warning = f"planned cluster {cluster} has no candidates"
    recs = rank_candidates(model, context, members, k, beta, Source.SERENDIP)
    return Retrieval(recs, context, cluster, node.description, warning)


def recommend_exploit(model: CooccurrenceModel, context: str, k: int = 20,
                      beta: float = DEFAULT_BETA) -> Retrieval:
    """Unrestricted top-`k` over the whole catalog."""
    scores = beta * model._prior
    row = model.transition_counts.get(context)
    if row:
        known = [(model._pos[i], c) for i, c in row.items() if i in model._pos]
        scores = scores.copy()
        for i, c in known:
            scores[i] += c
    own = model._pos.get(context)
    m = min(k, len(model._ids) - (own is not None))
    if m <= 0:
        return Retrieval([], context)
    # ids are sorted, so index order is the id tie-break
    order = np.lexsort((np.arange(len(scores)), -scores))
    recs = []
    for i in order:
        if i == own:
            continue
        recs.append(Recommendation(model._ids[i], float(scores[i]), Source.EXPLOIT))
        if len(recs) == m:
            break
    return Retrieval(recs, context)
