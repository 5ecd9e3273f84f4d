"""Similar / serendipitous pair labels, satisfaction mining and data curation.

Two items are *similar* at level ``l`` when they share their level-``l``
node, *serendipitous* when they differ at level ``l`` but share the node
at level ``l - delta``, and *unrelated* otherwise.
"""

from __future__ import annotations

import enum
import json
import logging
import zlib
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

from .clustertree import ClusterTree
from .corpus import InteractionLog, ItemCatalog, atomic_open
from .planner import PromptError, PromptType, assemble_prompt

logger = logging.getLogger(__name__)


class Label(str, enum.Enum):
    SIMILAR = "similar"
    SERENDIPITOUS = "serendipitous"
    UNRELATED = "unrelated"


class UnknownItemError(KeyError):
    pass


def check_levels(tree: ClusterTree, l: int, delta: int) -> None:
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    if not (0 <= l - delta and l <= tree.leaf_level):
        raise ValueError(f"need 0 <= l - delta and l <= {tree.leaf_level}; got l={l}, delta={delta}")


def _label(tree: ClusterTree, leaf_v: str, leaf_n: str, l: int, delta: int) -> Label:
    if tree.ancestor_at(leaf_v, l) == tree.ancestor_at(leaf_n, l):
        return Label.SIMILAR
    if tree.ancestor_at(leaf_v, l - delta) == tree.ancestor_at(leaf_n, l - delta):
        return Label.SERENDIPITOUS
    return Label.UNRELATED


def classify_pair(tree: ClusterTree, v: str, n: str, l: int = 3, delta: int = 1) -> Label:
    check_levels(tree, l, delta)
    for item in (v, n):
        if item not in tree:
            raise UnknownItemError(item)
    return _label(tree, tree.leaf_assignment[v], tree.leaf_assignment[n], l, delta)


def classify_cluster(tree: ClusterTree, v: str, cluster: str, delta: int = 1) -> Label:
    """Label of item `v` against a whole node (its level plays the role of ``l``)."""
    if v not in tree:
        raise UnknownItemError(v)
    l = tree.nodes[cluster].level
    check_levels(tree, l, delta)
    return _label(tree, tree.leaf_assignment[v], cluster, l, delta)


@dataclass
class SatisfactionStat:
    context_item_id: str
    target_cluster_id: str
    positive_count: int = 0
    total_count: int = 0
    alpha: float = 0.0

    @property
    def rate(self) -> float:
        """Positive fraction, additively smoothed towards 1/2 by `alpha`."""
        denom = self.total_count + 2 * self.alpha
        return (self.positive_count + self.alpha) / denom if denom > 0 else 0.0

    @property
    def support(self) -> int:
        return self.total_count


def label_counts(log: InteractionLog, tree: ClusterTree, l: int = 3, delta: int = 1) -> Counter:
    """Counts of transition labels, plus ``self`` and ``unassigned`` skips."""
    check_levels(tree, l, delta)
    counts: Counter = Counter()
    for rec in log:
        if rec.context_item_id == rec.next_item_id:
            counts["self"] += 1
        elif rec.context_item_id not in tree or rec.next_item_id not in tree:
            counts["unassigned"] += 1
        else:
            counts[classify_pair(tree, rec.context_item_id, rec.next_item_id, l, delta).value] += 1
    return counts


def mine_pairs(log: InteractionLog, tree: ClusterTree, l: int = 3, delta: int = 1,
               alpha: float = 0.0) -> list[SatisfactionStat]:
    """Aggregate satisfaction of serendipitous transitions per (context, cluster).

    Each record is one (context, next) transition. Self-transitions,
    records with items missing from the tree and non-serendipitous pairs
    are skipped. Output is sorted by (context id, cluster id).
    """
    check_levels(tree, l, delta)
    acc: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    skipped: Counter = Counter()
    leaf = tree.leaf_assignment
    for rec in log:
        v, n = rec.context_item_id, rec.next_item_id
        if v == n:
            skipped["self"] += 1
            continue
        if v not in leaf or n not in leaf:
            skipped["unassigned"] += 1
            continue
        cv, cn = tree.ancestor_at(leaf[v], l), tree.ancestor_at(leaf[n], l)
        if cv == cn or tree.ancestor_at(cv, l - delta) != tree.ancestor_at(cn, l - delta):
            skipped["not_serendipitous"] += 1
            continue
        slot = acc[(v, cn)]
        slot[0] += int(rec.satisfied)
        slot[1] += 1
    if skipped:
        logger.info("mine_pairs skipped %s", dict(skipped))
    return [SatisfactionStat(v, c, pos, tot, alpha) for (v, c), (pos, tot) in sorted(acc.items())]


@dataclass
class TrainingExample:
    context_item_id: str
    prompt_type: PromptType
    target_cluster_id: str
    target_description: str
    rate: float
    support: int


def curation_key(stat: SatisfactionStat) -> tuple:
    return (-stat.rate, -stat.total_count, stat.context_item_id)


def curate_training_data(stats: Iterable[SatisfactionStat], tree: ClusterTree, k: int = 10,
                         min_support: int = 5, delta: int = 1,
                         prompt_type: PromptType = PromptType.VIDEO_COT) -> list[TrainingExample]:
    """Keep the top-`k` contexts per target cluster.

    Stats below `min_support` are dropped; the rest are ranked by rate,
    then support (both descending), then context id. Every cluster
    contributes at most `k` examples regardless of its traffic.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    by_cluster: dict[str, list[SatisfactionStat]] = defaultdict(list)
    for s in stats:
        if s.total_count >= min_support:
            by_cluster[s.target_cluster_id].append(s)
    out = []
    for cluster in sorted(by_cluster):
        description = tree.nodes[cluster].description
        for s in sorted(by_cluster[cluster], key=curation_key)[:k]:
            if classify_cluster(tree, s.context_item_id, cluster, delta) is not Label.SERENDIPITOUS:
                raise ValueError(f"stat ({s.context_item_id}, {cluster}) is not serendipitous")
            out.append(TrainingExample(s.context_item_id, PromptType(prompt_type), cluster,
                                       description, s.rate, s.total_count))
    return out


def export_training_file(examples: Iterable[TrainingExample], tree: ClusterTree,
                         catalog: ItemCatalog, path: str | Path, level: Optional[int] = None,
                         frames: int = 4, use_thumbnail: bool = False) -> int:
    """Write the fine-tuning file: a vocabulary header, then one row per example.

    The header lists every level-`level` description so the tuned model
    sees the whole controlled-generation vocabulary. Examples whose prompt
    cannot be built (a video prompt for an item with no captions) are
    skipped. Returns the number of example rows written.
    """
    level = tree.leaf_level if level is None else level
    header = {
        "record": "header",
        "tree_version": tree.version,
        "level": level,
        "descriptions": tree.descriptions(level),
    }
    n = 0
    skipped: Counter = Counter()
    with atomic_open(path) as fh:
        fh.write(json.dumps(header) + "\n")
        for ex in examples:
            try:
                prompt = assemble_prompt(catalog[ex.context_item_id], tree, ex.prompt_type,
                                         frames, use_thumbnail, level)
            except PromptError:
                skipped[ex.context_item_id] += 1
                continue
            row = {
                "record": "example",
                "context_item_id": ex.context_item_id,
                "prompt_type": ex.prompt_type.value,
                "prompt": prompt.to_wire(),
                "target_cluster_id": ex.target_cluster_id,
                "target_description": ex.target_description,
                "rate": ex.rate,
                "support": ex.support,
            }
            fh.write(json.dumps(row) + "\n")
            n += 1
    if skipped:
        logger.warning("skipped %d training examples without visual input (contexts: %s)",
                       sum(skipped.values()), ", ".join(sorted(skipped)))
    return n


def load_training_file(path: str | Path) -> tuple[dict, list[TrainingExample]]:
    header = None
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("record") == "header":
                header = row
                continue
            examples.append(TrainingExample(
                row["context_item_id"], PromptType(row["prompt_type"]), row["target_cluster_id"],
                row["target_description"], float(row["rate"]), int(row["support"])))
    if header is None:
        raise ValueError(f"{path}: missing header record")
    return header, examples


def save_stats(stats: Iterable[SatisfactionStat], path: str | Path, tree_version: int) -> None:
    with atomic_open(path) as fh:
        fh.write(json.dumps({"record": "header", "tree_version": tree_version}) + "\n")
        for s in stats:
            fh.write(json.dumps(asdict(s)) + "\n")


def load_stats(path: str | Path) -> tuple[dict, list[SatisfactionStat]]:
    header, stats = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if row.get("record") == "header":
                header = row
            else:
                stats.append(SatisfactionStat(**row))
    return header, stats


def sibling_target(tree: ClusterTree, item_id: str, l: int = 3, delta: int = 1) -> Optional[str]:
    """A deterministic serendipitous node for `item_id`.

    Picks one of the other non-empty level-`l` nodes under the item's
    level-``l - delta`` ancestor, chosen by a hash of the item id so items
    of one cluster spread over its siblings. Used as the plan for items
    without a curated label; None when no such sibling exists.
    """
    check_levels(tree, l, delta)
    own = tree.item_ancestor(item_id, l)
    anc = tree.ancestor_at(own, l - delta)
    peers = [n.node_id for n in tree.level_nodes(l)
             if n.node_id != own and not n.is_empty
             and tree.ancestor_at(n.node_id, l - delta) == anc]
    if not peers:
        return None
    return peers[zlib.crc32(item_id.encode()) % len(peers)]


def eval_set(examples: Iterable[TrainingExample]) -> list[TrainingExample]:
    """One example per context: its best target by rate, support, then cluster id.

    A context can be curated into several clusters; a single-answer
    planner can match only one of them, so the eval set keeps the best.
    """
    best: dict[str, TrainingExample] = {}
    for ex in examples:
        cur = best.get(ex.context_item_id)
        key = (-ex.rate, -ex.support, ex.target_cluster_id)
        if cur is None or key < (-cur.rate, -cur.support, cur.target_cluster_id):
            best[ex.context_item_id] = ex
    return [best[c] for c in sorted(best)]


def best_targets(stats: Iterable[SatisfactionStat], min_support: int = 1) -> dict[str, str]:
    """Highest-rate target cluster per context (ties: support, then cluster id)."""
    best: dict[str, SatisfactionStat] = {}
    for s in stats:
        if s.total_count < min_support:
            continue
        cur = best.get(s.context_item_id)
        if cur is None or (-s.rate, -s.total_count, s.target_cluster_id) < \
                (-cur.rate, -cur.total_count, cur.target_cluster_id):
            best[s.context_item_id] = s
    return {c: s.target_cluster_id for c, s in sorted(best.items())}
