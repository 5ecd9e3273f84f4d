import math

import numpy as np
import pytest

from serendip.batchinfer import PlanCache
from serendip.corpus import InteractionLog, InteractionRecord, Item, ItemCatalog
from serendip.planner import PlanResult, ResolutionMethod
from serendip.retriever import (DAY, NoPlanError, Source, recommend_exploit, recommend_restricted,
                                train_cooccurrence)


def rec(v, n, ts, user="u"):
    return InteractionRecord(user, v, n, True, ts)


def catalog_of(weights):
    return ItemCatalog.from_items([Item(i, i, np.array([1.0]), traffic_weight=w)
                                   for i, w in weights.items()])


def test_zero_decay_gives_raw_counts():
    log = InteractionLog([rec("a", "b", 0), rec("a", "b", 5 * DAY), rec("a", "c", 9 * DAY),
                          rec("b", "b", 0)])
    model = train_cooccurrence(log, catalog_of({"a": 1, "b": 2, "c": 4}), decay=0.0)
    assert model.transition_counts == {"a": {"b": 2.0, "c": 1.0}}
    assert model.popularity_prior == {"a": 0.25, "b": 0.5, "c": 1.0}


def test_decay_matches_brute_force(world, world_log):
    decay = math.log(2) / 7
    model = train_cooccurrence(world_log, world.catalog, decay)
    newest = max(r.timestamp for r in world_log)
    brute: dict = {}
    for r in world_log:
        if r.context_item_id != r.next_item_id:
            key = (r.context_item_id, r.next_item_id)
            brute[key] = brute.get(key, 0.0) + math.exp(-decay * (newest - r.timestamp) / DAY)
    got = {(c, n): w for c, row in model.transition_counts.items() for n, w in row.items()}
    assert got.keys() == brute.keys()
    for key, w in brute.items():
        assert got[key] == pytest.approx(w, rel=1e-12)


def test_one_week_half_life():
    log = InteractionLog([rec("a", "b", 0), rec("a", "c", 7 * DAY)])
    model = train_cooccurrence(log, catalog_of({"a": 1, "b": 1, "c": 1}))
    assert model.transition_counts["a"]["b"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        train_cooccurrence(InteractionLog(), catalog_of({"a": 1}))


def brute_rank(model, context, candidates, k, beta):
    scored = sorted(((model.score(context, c, beta), c) for c in candidates if c != context),
                    key=lambda s: (-s[0], s[1]))
    return [c for _, c in scored[:k]]


def cache_for(plans):
    entries = {ctx: PlanResult(ctx, "x", None, cluster, cluster is not None,
                               ResolutionMethod.EXACT if cluster else ResolutionMethod.UNRESOLVED)
               for ctx, cluster in plans.items()}
    return PlanCache(1, 0, entries)


def test_restricted_matches_brute_force(world, world_tree, world_log):
    model = train_cooccurrence(world_log, world.catalog)
    leaves = world_tree.level_nodes(3)
    contexts = world.catalog.ids[:60]
    cache = cache_for({c: leaves[n % len(leaves)].node_id for n, c in enumerate(contexts)})
    for n, ctx in enumerate(contexts):
        cluster = leaves[n % len(leaves)]
        for beta in (0.0, 0.1, 2.0):
            got = recommend_restricted(model, world_tree, cache, ctx, k=5, beta=beta)
            assert got.item_ids == brute_rank(model, ctx, cluster.members, 5, beta)
            assert got.planned_cluster == cluster.node_id
            assert got.description == cluster.description
            assert all(r.source is Source.SERENDIP for r in got)
            assert set(got.item_ids) <= set(cluster.members)


def test_exploit_matches_brute_force(world, world_log):
    model = train_cooccurrence(world_log, world.catalog)
    ids = world.catalog.ids
    for ctx in ids[:40] + ["not-in-catalog"]:
        for k in (1, 10):
            got = recommend_exploit(model, ctx, k=k)
            assert got.item_ids == brute_rank(model, ctx, ids, k, 0.1)
            for r in got:
                assert r.score == pytest.approx(model.score(ctx, r.item_id))
                assert r.source is Source.EXPLOIT


def test_empty_cluster_warns(world_tree):
    leaf = world_tree.level_nodes(3)[0]
    model = train_cooccurrence(InteractionLog([rec("a", "b", 0)]), catalog_of({"a": 1, "b": 1}))
    only = leaf.members[0]
    saved = list(leaf.members)
    leaf.members[:] = [only]
    try:
        got = recommend_restricted(model, world_tree, cache_for({only: leaf.node_id}), only)
    finally:
        leaf.members[:] = saved
    assert len(got) == 0 and "no candidates" in got.warning


def test_missing_or_unresolved_plan(world_tree):
    model = train_cooccurrence(InteractionLog([rec("a", "b", 0)]), catalog_of({"a": 1, "b": 1}))
    cache = cache_for({"a": None})
    with pytest.raises(NoPlanError):
        recommend_restricted(model, world_tree, cache, "a")
    with pytest.raises(NoPlanError):
        recommend_restricted(model, world_tree, cache, "zzz")


def test_retrieval_serializes(world, world_tree, world_log):
    model = train_cooccurrence(world_log, world.catalog)
    leaf = world_tree.level_nodes(3)[1]
    ctx = world.catalog.ids[0]
    doc = recommend_restricted(model, world_tree, cache_for({ctx: leaf.node_id}), ctx, 3).to_dict()
    assert doc["planned_cluster"] == leaf.node_id
    assert [r["source"] for r in doc["recommendations"]] == ["serendip"] * 3
