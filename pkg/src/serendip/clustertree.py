"""Hierarchical, traffic-balanced interest clusters.

The tree is built top-down: every internal node splits its members into
`branching[level]` children with a capacity-constrained spherical k-means,
then a local search moves items from heavy to light children until the
traffic masses are within ``1 + balance_tolerance`` of each other (or no
move reduces the spread). Every node gets a short description built from
the distinctive title terms of its members; descriptions are unique
across the whole tree so they can be mapped back to node ids.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .corpus import Item, ItemCatalog, atomic_open

logger = logging.getLogger(__name__)

ROOT = "r"

STOPWORDS = frozenset(
    "a an and are as at be by for from how in is it of on or the this to with "
    "vs your you my our new best top".split()
)


class TreeError(ValueError):
    pass


@dataclass
class ClusterNode:
    node_id: str
    level: int
    parent: Optional[str]
    children: list[str] = field(default_factory=list)
    description: str = ""
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    traffic_mass: float = 0.0
    members: list[str] = field(default_factory=list, repr=False)

    @property
    def is_empty(self) -> bool:
        return not self.members

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "level": self.level,
            "parent": self.parent,
            "children": list(self.children),
            "description": self.description,
            "centroid": [float(x) for x in self.centroid],
            "traffic_mass": float(self.traffic_mass),
        }


@dataclass
class TreeConfig:
    levels: int = 4
    branching: Sequence[int] = (4, 4, 4)
    balance_tolerance: float = 0.25
    seed: int = 0
    kmeans_iters: int = 20

    def validate(self) -> None:
        if self.levels < 1:
            raise TreeError("levels must be >= 1")
        if len(self.branching) != self.levels - 1:
            raise TreeError(
                f"branching needs {self.levels - 1} entries, got {len(self.branching)}")
        if any(b < 1 for b in self.branching):
            raise TreeError("all fan-outs must be >= 1")
        if self.balance_tolerance < 0:
            raise TreeError("balance_tolerance must be >= 0")


class ClusterTree:
    """A built tree. Treat as immutable once constructed."""

    def __init__(self, levels: int, nodes: dict[str, ClusterNode],
                 leaf_assignment: dict[str, str], balance_tolerance: float = 0.25,
                 version: int = 1, branching: Sequence[int] = ()):
        self.levels = levels
        self.nodes = nodes
        self.leaf_assignment = leaf_assignment
        self.balance_tolerance = balance_tolerance
        self.version = version
        self.branching = tuple(branching)
        self._desc_index: dict[Optional[int], dict[str, str]] = {}

    @property
    def root(self) -> ClusterNode:
        return self.nodes[ROOT]

    @property
    def leaf_level(self) -> int:
        return self.levels - 1

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.leaf_assignment

    def level_nodes(self, level: int) -> list[ClusterNode]:
        return sorted((n for n in self.nodes.values() if n.level == level),
                      key=lambda n: n.node_id)

    def members(self, node_id: str) -> list[str]:
        return self.nodes[node_id].members

    @property
    def warnings(self) -> list[str]:
        return [f"empty leaf {n.node_id}" for n in self.level_nodes(self.leaf_level)
                if n.is_empty]

    def ancestor_at(self, node_id: str, level: int) -> str:
        return ancestor_at(self, node_id, level)

    def item_ancestor(self, item_id: str, level: int) -> str:
        """Node containing `item_id` at `level`."""
        return ancestor_at(self, self.leaf_assignment[item_id], level)

    def path(self, item_id: str) -> list[str]:
        node = self.leaf_assignment[item_id]
        out = [node]
        while self.nodes[node].parent is not None:
            node = self.nodes[node].parent
            out.append(node)
        return out[::-1]

    def description_index(self, level: Optional[int] = None) -> dict[str, str]:
        """Map description -> node id over non-empty nodes (optionally one level)."""
        if level not in self._desc_index:
            self._desc_index[level] = {
                n.description.strip(): n.node_id
                for n in self.nodes.values()
                if not n.is_empty and (level is None or n.level == level)
            }
        return self._desc_index[level]

    def descriptions(self, level: Optional[int] = None) -> list[str]:
        """Descriptions of non-empty nodes, ordered by node id."""
        index = self.description_index(level)
        return sorted(index, key=lambda d: index[d])

    def structure_equal(self, other: "ClusterTree") -> bool:
        """Node-by-node equality ignoring `version`."""
        a, b = self.to_dict(), other.to_dict()
        a.pop("version"), b.pop("version")
        return a == b

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "levels": self.levels,
            "branching": list(self.branching),
            "balance_tolerance": self.balance_tolerance,
            "nodes": [self.nodes[k].to_dict() for k in _node_order(self.nodes)],
            "leaf_assignment": dict(sorted(self.leaf_assignment.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterTree":
        nodes = {}
        for row in doc["nodes"]:
            nodes[row["node_id"]] = ClusterNode(
                node_id=row["node_id"], level=int(row["level"]), parent=row["parent"],
                children=list(row["children"]), description=row["description"],
                centroid=np.asarray(row["centroid"], dtype=float),
                traffic_mass=float(row["traffic_mass"]),
            )
        leaf_assignment = dict(doc["leaf_assignment"])
        tree = cls(int(doc["levels"]), nodes, leaf_assignment,
                   float(doc.get("balance_tolerance", 0.25)), int(doc["version"]),
                   doc.get("branching", ()))
        for item_id, leaf in sorted(leaf_assignment.items()):
            node = leaf
            while node is not None:
                nodes[node].members.append(item_id)
                node = nodes[node].parent
        return tree

    def save(self, path: str | Path) -> None:
        _atomic_write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "ClusterTree":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _node_order(nodes: dict[str, ClusterNode]) -> list[str]:
    return sorted(nodes, key=lambda k: (nodes[k].level, k))


def _atomic_write_json(path: Path, doc: dict) -> None:
    with atomic_open(path) as fh:
        json.dump(doc, fh)


# -- balanced split ---------------------------------------------------------

def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        sims = X @ X[chosen].T
        d = np.clip(1.0 - sims.max(axis=1), 0.0, None) ** 2
        d[chosen] = 0.0
        if d.sum() <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(rest)))
        else:
            chosen.append(int(rng.choice(n, p=d / d.sum())))
    return X[chosen].copy()


def _capacity_assign(sims: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Greedy highest-similarity-first assignment under equal mass capacity."""
    n, k = sims.shape
    cap = w.sum() / k
    slack = 1e-9 * max(w.sum(), 1.0)
    order = np.lexsort((np.repeat(np.arange(n), k), -sims.ravel()))
    labels = np.full(n, -1)
    mass = np.zeros(k)
    remaining = n
    for flat in order:
        i, j = divmod(int(flat), k)
        if labels[i] >= 0:
            continue
        if mass[j] + w[i] <= cap + slack:
            labels[i] = j
            mass[j] += w[i]
            remaining -= 1
            if remaining == 0:
                break
    # leftovers did not fit anywhere; heaviest first into the lightest child
    for i in sorted(np.flatnonzero(labels < 0), key=lambda i: (-w[i], i)):
        j = int(np.argmin(mass))
        labels[i] = j
        mass[j] += w[i]
    return labels


def _fill_empty(labels: np.ndarray, sims: np.ndarray, k: int) -> None:
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        donors = np.flatnonzero((counts[labels] > 1))
        i = donors[np.argmax(sims[donors, j] - sims[donors, labels[donors]])]
        labels[i] = j


def _rebalance(labels: np.ndarray, sims: np.ndarray, w: np.ndarray, k: int,
               tol: float, max_moves: int = 100_000) -> int:
    """Move items from heavy to light children until balanced or stuck.

    Each move strictly reduces the variance of child masses, so the loop
    terminates. Candidate items are tried in order of increasing
    similarity loss. Returns the number of moves made.
    """
    mass = np.bincount(labels, weights=w, minlength=k)
    counts = np.bincount(labels, minlength=k)
    moves = 0
    while moves < max_moves:
        lo = mass.min()
        if lo > 0 and mass.max() / lo <= 1.0 + tol:
            break
        pairs = sorted(((a, b) for a in range(k) for b in range(k) if mass[a] > mass[b]),
                       key=lambda p: (-(mass[p[0]] - mass[p[1]]), p))
        moved = False
        for a, b in pairs:
            if counts[a] <= 1:
                continue
            gap = mass[a] - mass[b]
            cand = np.flatnonzero((labels == a) & (w < gap))
            if cand.size == 0:
                continue
            loss = sims[cand, a] - sims[cand, b]
            i = cand[np.lexsort((cand, loss))[0]]
            labels[i] = b
            mass[a] -= w[i]
            mass[b] += w[i]
            counts[a] -= 1
            counts[b] += 1
            moves += 1
            moved = True
            break
        if not moved:
            break
    return moves


def _polish(labels: np.ndarray, X: np.ndarray, w: np.ndarray, k: int, tol: float,
            rounds: int = 10) -> None:
    """Move items to their nearest centroid while the balance bound still holds.

    Only used once the split is already within tolerance; it spends the
    slack the bound allows on topical coherence.
    """
    for _ in range(rounds):
        centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        sims = X @ _unit_rows(centers).T
        best = sims.argmax(axis=1)
        gain = sims[np.arange(len(labels)), best] - sims[np.arange(len(labels)), labels]
        mass = np.bincount(labels, weights=w, minlength=k)
        counts = np.bincount(labels, minlength=k)
        moved = 0
        for i in np.lexsort((np.arange(len(labels)), -gain)):
            if gain[i] <= 0:
                break
            a, b = labels[i], best[i]
            if counts[a] <= 1:
                continue
            mass[a] -= w[i]
            mass[b] += w[i]
            if mass.min() > 0 and mass.max() / mass.min() <= 1.0 + tol:
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                moved += 1
            else:
                mass[a] += w[i]
                mass[b] -= w[i]
        if moved == 0:
            break


def balanced_split(X: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator,
                   tol: float = 0.25, iters: int = 20) -> np.ndarray:
    """Split unit vectors `X` into `k` non-empty groups of near-equal weight `w`.

    Returns integer labels in ``range(k)``. Requires ``1 <= k <= len(X)``.
    """
    n = X.shape[0]
    if k == 1:
        return np.zeros(n, dtype=int)
    bal_w = w if w.sum() > 0 else np.ones(n)
    centers = _kmeanspp(X, k, rng)
    labels = None
    for _ in range(iters):
        sims = X @ _unit_rows(centers).T
        new = _capacity_assign(sims, bal_w)
        _fill_empty(new, sims, k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
    sims = X @ _unit_rows(centers).T
    _rebalance(labels, sims, bal_w, k, tol)
    mass = np.bincount(labels, weights=bal_w, minlength=k)
    if mass.min() > 0 and mass.max() / mass.min() <= 1.0 + tol:
        _polish(labels, X, bal_w, k, tol)
    return labels


# -- descriptions -----------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def title_terms(title: str) -> list[str]:
    return [t for t in _TOKEN.findall(title.lower()) if len(t) > 1 and t not in STOPWORDS]


def term_statistics(items: Iterable[Item]) -> Counter:
    """Corpus-wide term frequencies over item titles."""
    stats: Counter = Counter()
    for item in items:
        stats.update(title_terms(item.title))
    return stats


def distinctive_terms(member_items: Iterable[Item], term_stats: Counter,
                      n: int = 3) -> list[tuple[str, float]]:
    """Top `n` terms by in-cluster frequency over corpus frequency.

    Ties go to the more frequent in-cluster term, then alphabetical order.
    """
    local: Counter = Counter()
    for item in member_items:
        local.update(title_terms(item.title))
    scored = [(t, c / term_stats[t], c) for t, c in local.items() if term_stats[t] > 0]
    scored.sort(key=lambda s: (-s[1], -s[2], s[0]))
    return [(t, s) for t, s, _ in scored[:n]]


def describe_cluster(node: ClusterNode, member_items: Sequence[Item], term_stats: Counter,
                     taken: Optional[set[str]] = None) -> str:
    """Short text naming a cluster's topical focus.

    With `taken`, the result is made unique against it by appending
    ``#2``, ``#3``, ... and then added to it.
    """
    if not member_items:
        text = f"(empty cluster {node.node_id})"
    else:
        terms = [t for t, _ in distinctive_terms(member_items, term_stats)]
        text = ", ".join(terms) if terms else f"cluster {node.node_id}"
    if taken is not None:
        base, k = text, 2
        while text in taken:
            text = f"{base} #{k}"
            k += 1
        taken.add(text)
    return text


# -- build / query ----------------------------------------------------------

def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(node_id.encode())])


def build_tree(catalog: ItemCatalog, config: Optional[TreeConfig] = None,
               version: int = 1) -> ClusterTree:
    """Cluster `catalog` into a `config.levels`-deep balanced tree."""
    config = config or TreeConfig()
    config.validate()
    if len(catalog) == 0:
        raise TreeError("catalog is empty")
    X_all = catalog.matrix()
    w_all = catalog.weights()
    ids = catalog.ids
    nodes: dict[str, ClusterNode] = {}
    leaf_assignment: dict[str, str] = {}

    def build(node_id: str, level: int, parent: Optional[str], idx: np.ndarray) -> None:
        member_ids = [ids[i] for i in idx]
        node = ClusterNode(
            node_id=node_id, level=level, parent=parent, members=member_ids,
            centroid=X_all[idx].mean(axis=0) if idx.size else np.zeros(catalog.dimension),
            traffic_mass=float(w_all[idx].sum()),
        )
        nodes[node_id] = node
        if level == config.levels - 1:
            for item_id in member_ids:
                leaf_assignment[item_id] = node_id
            return
        k = max(1, min(config.branching[level], idx.size))
        if idx.size == 0:
            labels = np.zeros(0, dtype=int)
        else:
            labels = balanced_split(X_all[idx], w_all[idx], k, _node_rng(config.seed, node_id),
                                    config.balance_tolerance, config.kmeans_iters)
        groups = [idx[labels == j] for j in range(k)]
        # canonical child order: heaviest first, then smallest member id
        groups.sort(key=lambda g: (-float(w_all[g].sum()), int(g.min()) if g.size else -1))
        for j, g in enumerate(groups):
            child = f"{node_id}.{j}"
            node.children.append(child)
            build(child, level + 1, node_id, g)

    build(ROOT, 0, None, np.arange(len(ids)))

    term_stats = term_statistics(catalog)
    taken: set[str] = set()
    for key in _node_order(nodes):
        node = nodes[key]
        node.description = describe_cluster(
            node, [catalog[i] for i in node.members], term_stats, taken)

    tree = ClusterTree(config.levels, nodes, leaf_assignment, config.balance_tolerance,
                       version, config.branching)
    for msg in tree.warnings:
        logger.warning(msg)
    return tree


def ancestor_at(tree: ClusterTree, node_id: str, level: int) -> str:
    node = tree.nodes[node_id]
    if not 0 <= level <= node.level:
        raise TreeError(f"level {level} out of range for node {node_id} at level {node.level}")
    while node.level > level:
        node = tree.nodes[node.parent]
    return node.node_id


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def assign_item(tree: ClusterTree, item: Item) -> list[str]:
    """Greedy root-to-leaf descent by centroid cosine similarity.

    Ties (within 1e-12) go to the child with smaller traffic mass, then the
    lexically smaller node id.
    """
    node = tree.root
    path = [node.node_id]
    while node.children:
        children = [tree.nodes[c] for c in node.children]
        sims = [_cosine(item.topic_vector, c.centroid) for c in children]
        best = max(sims)
        tied = [c for c, s in zip(children, sims) if s >= best - 1e-12]
        node = min(tied, key=lambda c: (c.traffic_mass, c.node_id))
        path.append(node.node_id)
    return path


def resolve_description(tree: ClusterTree, text: str,
                        level: Optional[int] = None) -> Optional[str]:
    """Node whose description equals `text` after trimming, else None."""
    return tree.description_index(level).get(text.strip())


def balance_violations(tree: ClusterTree) -> list[tuple[str, float]]:
    """Internal nodes whose children exceed the traffic-balance tolerance.

    Parents with fewer than twice their fan-out in items are exempt.
    Returns ``(node_id, max/min mass ratio)`` pairs.
    """
    out = []
    for node in tree.nodes.values():
        if not node.children:
            continue
        fan_out = tree.branching[node.level] if tree.branching else len(node.children)
        if len(node.members) < 2 * fan_out:
            continue
        masses = [tree.nodes[c].traffic_mass for c in node.children]
        lo, hi = min(masses), max(masses)
        ratio = float("inf") if lo <= 0 else hi / lo
        if ratio > 1.0 + tree.balance_tolerance + 1e-9:
            out.append((node.node_id, ratio))
    return sorted(out)
