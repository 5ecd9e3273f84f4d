"""Offline planner metrics, live-metric analogues and a synthetic-user simulator."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .clustertree import ClusterTree
from .corpus import InteractionLog, InteractionRecord, ItemCatalog, atomic_open
from .batchinfer import PlanCache
from .planner import PlanResult
from .retriever import (DEFAULT_BETA, CooccurrenceModel, NoPlanError, Source, rank_candidates,
                        recommend_exploit, recommend_restricted)
from .serendipity import Label, check_levels


# -- planner metrics --------------------------------------------------------

def match_rate(outputs: Sequence[PlanResult]) -> float:
    """Share of generations that exactly matched some vocabulary description."""
    if not outputs:
        return 0.0
    return sum(1 for o in outputs if o.exact_match) / len(outputs)


def recall(outputs: Sequence[tuple[PlanResult, str]], tree: Optional[ClusterTree] = None,
           level: Optional[int] = None) -> float:
    """Share of generations equal (after trimming) to their label description.

    With `tree`, every label must be a description at `level` (default:
    leaf level); otherwise the eval set is corrupt and ValueError is raised.
    """
    if tree is not None:
        vocab = tree.description_index(tree.leaf_level if level is None else level)
        bad = [label for _, label in outputs if label.strip() not in vocab]
        if bad:
            raise ValueError(f"{len(bad)} labels are not valid descriptions, e.g. {bad[0]!r}")
    if not outputs:
        return 0.0
    hits = sum(1 for o, label in outputs if o.raw_generation.strip() == label.strip())
    return hits / len(outputs)


@dataclass
class EvalReport:
    match_rate: float
    recall: float
    n_examples: int
    per_cluster_recall: dict[str, float] = field(default_factory=dict)


def evaluate_plans(outputs: Sequence[tuple[PlanResult, str]], tree: ClusterTree,
                   level: Optional[int] = None) -> EvalReport:
    """Match rate, recall and per-label-cluster recall over a labelled set."""
    level = tree.leaf_level if level is None else level
    rec = recall(outputs, tree, level)
    index = tree.description_index(level)
    hits: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for o, label in outputs:
        slot = hits[index[label.strip()]]
        slot[0] += o.raw_generation.strip() == label.strip()
        slot[1] += 1
    per_cluster = {c: h / n for c, (h, n) in sorted(hits.items())}
    return EvalReport(match_rate([o for o, _ in outputs]), rec, len(outputs), per_cluster)


# -- live-metric analogues --------------------------------------------------

@dataclass(frozen=True)
class Impression:
    user_id: str
    item_id: str
    positive: bool
    context_item_id: str = ""
    label: Optional[str] = None
    step: int = -1


@dataclass
class ModelNovelty:
    impressions: int
    novel_impressions: int
    novel_ratio: float
    positive_feedback_ratio: float


def novelty_report(impression_logs: Mapping[str, Iterable[Impression]]) -> dict[str, ModelNovelty]:
    """Per model: share of impressions no other model showed to the same user.

    An impression (user, item) is novel for a model when no other model in
    `impression_logs` impressed that item on that user. Also reports the
    share of impressions with positive feedback.
    """
    logs = {m: list(v) for m, v in impression_logs.items()}
    if len(logs) < 2:
        raise ValueError("novelty needs at least two models")
    seen = {m: {(i.user_id, i.item_id) for i in imps} for m, imps in logs.items()}
    report = {}
    for m, imps in sorted(logs.items()):
        others: set = set().union(*(s for o, s in seen.items() if o != m))
        n = len(imps)
        novel = sum(1 for i in imps if (i.user_id, i.item_id) not in others)
        pos = sum(1 for i in imps if i.positive)
        report[m] = ModelNovelty(n, novel, novel / n if n else 0.0, pos / n if n else 0.0)
    return report


@dataclass
class BucketGain:
    bucket: int
    score_min: float
    score_max: float
    n_contexts: int
    treatment_impressions: int
    baseline_impressions: int
    treatment_rate: float
    baseline_rate: float
    gain: float


def bucket_analysis(impression_logs: Mapping[str, Iterable[Impression]],
                    scores: Mapping[str, Optional[float]], n_buckets: int = 5,
                    treatment: str = "serendip", baseline: str = "exploit") -> list[BucketGain]:
    """Relative engagement gain of `treatment` over `baseline` per score bucket.

    Context items are split into `n_buckets` equal-population buckets by
    visually-interesting score, bucket 1 holding the highest scores.
    ``gain = treatment_rate / baseline_rate - 1`` (NaN when the baseline
    rate is zero). Contexts without a score are skipped.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    t_imps = list(impression_logs[treatment])
    b_imps = list(impression_logs[baseline])
    contexts = {i.context_item_id for i in t_imps + b_imps}
    scored = sorted((c for c in contexts if scores.get(c) is not None),
                    key=lambda c: (-scores[c], c))
    if not scored:
        raise ValueError("no context item has a visually interesting score")
    bucket_of = {}
    chunks = np.array_split(np.arange(len(scored)), n_buckets)
    for b, chunk in enumerate(chunks, 1):
        for j in chunk:
            bucket_of[scored[j]] = b

    def tally(imps: list[Impression]) -> dict[int, list[int]]:
        acc: dict[int, list[int]] = defaultdict(lambda: [0, 0])
        for i in imps:
            b = bucket_of.get(i.context_item_id)
            if b is not None:
                acc[b][0] += i.positive
                acc[b][1] += 1
        return acc

    t, base = tally(t_imps), tally(b_imps)
    out = []
    for b, chunk in enumerate(chunks, 1):
        members = [scores[scored[j]] for j in chunk]
        tp, tn = t[b]
        bp, bn = base[b]
        tr = tp / tn if tn else math.nan
        br = bp / bn if bn else math.nan
        gain = tr / br - 1.0 if bn and br > 0 and tn else math.nan
        out.append(BucketGain(b, min(members, default=math.nan), max(members, default=math.nan),
                              len(chunk), tn, bn, tr, br, gain))
    return out


def write_bucket_csv(gains: Sequence[BucketGain], path: str | Path) -> None:
    with atomic_open(path, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(gains[0])) if gains else ["bucket"])
        writer.writeheader()
        for g in gains:
            writer.writerow(asdict(g))


# -- simulator --------------------------------------------------------------

Policy = Callable[[str, int], Sequence[str]]


@dataclass
class SimConfig:
    n_users: int = 200
    n_steps: int = 10_000
    k: int = 5
    prefs_per_user: int = 3
    p_similar: float = 0.30
    p_serendip: float = 0.45
    p_unrelated: float = 0.15
    visual_boost: float = 0.0
    l: int = 3
    delta: int = 1
    seed: int = 0
    step_seconds: int = 60
    start: int = 1_700_000_000

    def validate(self) -> None:
        for name in ("p_similar", "p_serendip", "p_unrelated"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.n_users < 1 or self.n_steps < 0 or self.k < 1 or self.prefs_per_user < 1:
            raise ValueError("n_users, k and prefs_per_user must be >= 1; n_steps >= 0")
        if self.visual_boost < 0:
            raise ValueError("visual_boost must be >= 0")

    def engagement_probability(self, label: Label, visual_score: Optional[float]) -> float:
        if label is Label.SIMILAR:
            return self.p_similar
        if label is Label.UNRELATED:
            return self.p_unrelated
        return min(1.0, self.p_serendip + self.visual_boost * (visual_score or 0.0))


@dataclass
class SimResult:
    log: InteractionLog
    impressions: dict[str, list[Impression]]

    def save_impressions(self, path: str | Path) -> None:
        with atomic_open(path) as fh:
            for model, imps in self.impressions.items():
                for i in imps:
                    fh.write(json.dumps({"model": model, **asdict(i)}) + "\n")


def load_impressions(path: str | Path) -> dict[str, list[Impression]]:
    out: dict[str, list[Impression]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out[row.pop("model")].append(Impression(**row))
    return dict(out)


def interleave(lists: Sequence[Sequence[str]]) -> list[str]:
    """Round-robin merge, keeping the first occurrence of each item."""
    out, seen = [], set()
    for rank in range(max((len(x) for x in lists), default=0)):
        for lst in lists:
            if rank < len(lst) and lst[rank] not in seen:
                seen.add(lst[rank])
                out.append(lst[rank])
    return out


def simulate(catalog: ItemCatalog, tree: ClusterTree, policies: Mapping[str, Policy],
             sim: Optional[SimConfig] = None) -> SimResult:
    """Seeded user simulation over `policies`.

    Each step draws a user and a context item from one of the user's
    preferred leaf clusters, asks every policy for its top-k, interleaves
    the lists in a random policy order and samples engagement from the
    label of each (context, shown item) pair. An item nominated by several
    policies counts as an impression for each of them.
    """
    sim = sim or SimConfig()
    sim.validate()
    check_levels(tree, sim.l, sim.delta)
    rng = np.random.default_rng(sim.seed)
    leaves = [n for n in tree.level_nodes(tree.leaf_level) if not n.is_empty]
    users = [f"s{u:05d}" for u in range(sim.n_users)]
    n_pref = min(sim.prefs_per_user, len(leaves))
    prefs = {u: [leaves[j] for j in rng.choice(len(leaves), size=n_pref, replace=False)]
             for u in users}
    names = sorted(policies)
    at_l = {i: tree.ancestor_at(leaf, sim.l) for i, leaf in tree.leaf_assignment.items()}
    at_top = {i: tree.ancestor_at(leaf, sim.l - sim.delta)
              for i, leaf in tree.leaf_assignment.items()}

    def label(v: str, n: str) -> Label:
        if at_l[v] == at_l[n]:
            return Label.SIMILAR
        return Label.SERENDIPITOUS if at_top[v] == at_top[n] else Label.UNRELATED

    records: list[InteractionRecord] = []
    impressions: dict[str, list[Impression]] = {m: [] for m in names}
    for step in range(sim.n_steps):
        user = users[int(rng.integers(sim.n_users))]
        leaf = prefs[user][int(rng.integers(n_pref))]
        ctx = leaf.members[int(rng.integers(len(leaf.members)))]
        lists = {m: list(policies[m](ctx, sim.k))[: sim.k] for m in names}
        order = [names[j] for j in rng.permutation(len(names))]
        slate = interleave([lists[m] for m in order])
        ts = sim.start + step * sim.step_seconds
        vis = catalog[ctx].visually_interesting_score
        for item in slate:
            lab = label(ctx, item)
            engaged = bool(rng.random() < sim.engagement_probability(lab, vis))
            records.append(InteractionRecord(user, ctx, item, engaged, ts))
            for m in names:
                if item in lists[m]:
                    impressions[m].append(Impression(user, item, engaged, ctx, lab.value, step))
    log = InteractionLog(records)
    log.ingest_stats.accepted = len(records)
    return SimResult(log, impressions)


# -- simulation policies ----------------------------------------------------

def serendip_policy(model: CooccurrenceModel, tree: ClusterTree, cache: PlanCache,
                    beta: float = DEFAULT_BETA) -> Policy:
    """Planned-cluster retrieval; contexts without a plan get no nominations."""
    def policy(context: str, k: int) -> list[str]:
        try:
            return recommend_restricted(model, tree, cache, context, k, beta).item_ids
        except NoPlanError:
            return []
    return policy


def exploit_policy(model: CooccurrenceModel, beta: float = DEFAULT_BETA) -> Policy:
    return lambda context, k: recommend_exploit(model, context, k, beta).item_ids


def similar_policy(model: CooccurrenceModel, tree: ClusterTree, level: Optional[int] = None,
                   beta: float = DEFAULT_BETA) -> Policy:
    """Exploration baseline that stays inside the context's own cluster."""
    level = tree.leaf_level if level is None else level

    def policy(context: str, k: int) -> list[str]:
        own = tree.item_ancestor(context, level)
        return [r.item_id for r in
                rank_candidates(model, context, tree.members(own), k, beta, Source.EXPLOIT)]
    return policy


def novel_cluster_policy(model: CooccurrenceModel, tree: ClusterTree, seed: int = 0,
                         level: Optional[int] = None, beta: float = DEFAULT_BETA) -> Policy:
    """Exploration baseline that jumps to a uniformly random other cluster."""
    level = tree.leaf_level if level is None else level
    nodes = [n.node_id for n in tree.level_nodes(level) if not n.is_empty]
    rng = np.random.default_rng(seed)

    def policy(context: str, k: int) -> list[str]:
        own = tree.item_ancestor(context, level)
        others = [n for n in nodes if n != own]
        if not others:
            return []
        target = others[int(rng.integers(len(others)))]
        return [r.item_id for r in
                rank_candidates(model, context, tree.members(target), k, beta, Source.EXPLOIT)]
    return policy


def baseline_policies(model: CooccurrenceModel, tree: ClusterTree, cache: PlanCache,
                      seed: int = 0, beta: float = DEFAULT_BETA) -> dict[str, Policy]:
    """The planned policy next to one exploitation and two exploration baselines."""
    return {
        "serendip": serendip_policy(model, tree, cache, beta),
        "exploit": exploit_policy(model, beta),
        "similar": similar_policy(model, tree, beta=beta),
        "novel_cluster": novel_cluster_policy(model, tree, seed, beta=beta),
    }
