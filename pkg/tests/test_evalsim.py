import csv
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from serendip.evalsim import (Impression, SimConfig, bucket_analysis, evaluate_plans, interleave,
                              load_impressions, match_rate, novelty_report, recall, simulate,
                              write_bucket_csv)
from serendip.planner import PlanResult, ResolutionMethod
from serendip.serendipity import Label, sibling_target


def out(text, exact=True):
    return PlanResult("c", text, exact_match=exact,
                      resolution_method=ResolutionMethod.EXACT if exact else
                      ResolutionMethod.UNRESOLVED)


def test_recall_three_of_five():
    pairs = [(out("a"), "a"), (out("b"), "b"), (out(" c\n"), "c"), (out("x"), "d"),
             (out("y", False), "e")]
    assert recall(pairs) == 0.6
    assert match_rate([o for o, _ in pairs]) == 0.8
    assert recall([]) == 0.0 and match_rate([]) == 0.0


def test_wrong_but_valid_labels(world_tree):
    descs = world_tree.descriptions(3)
    pairs = [(out(descs[j]), descs[j + 1]) for j in range(10)]
    report = evaluate_plans(pairs, world_tree)
    assert report.recall == 0.0 and report.match_rate == 1.0 and report.n_examples == 10
    assert set(report.per_cluster_recall.values()) == {0.0}


def test_invalid_label_is_an_error(world_tree):
    with pytest.raises(ValueError):
        recall([(out("a"), "not a description")], world_tree)


def imp(user, item, positive=False, ctx="c"):
    return Impression(user, item, positive, ctx)


def test_novelty_two_thirds():
    report = novelty_report({"A": [imp("u", "x", True), imp("u", "y"), imp("u", "z")],
                             "B": [imp("u", "x")]})
    assert report["A"].novel_ratio == pytest.approx(2 / 3)
    assert report["A"].positive_feedback_ratio == pytest.approx(1 / 3)
    assert report["B"].novel_ratio == 0.0


def test_identical_sets_have_no_novelty():
    same = [imp("u", "x"), imp("v", "y")]
    report = novelty_report({"A": same, "B": list(same)})
    assert report["A"].novel_ratio == report["B"].novel_ratio == 0.0
    with pytest.raises(ValueError):
        novelty_report({"A": same})


pairs_st = st.lists(st.tuples(st.sampled_from("uvw"), st.sampled_from("abcdef")), max_size=25)


@settings(max_examples=60, deadline=None)
@given(a=pairs_st, b=pairs_st, c=pairs_st)
def test_novelty_matches_set_difference(a, b, c):
    logs = {"A": [imp(u, i) for u, i in a], "B": [imp(u, i) for u, i in b],
            "C": [imp(u, i) for u, i in c]}
    report = novelty_report(logs)
    for m, pairs in (("A", a), ("B", b), ("C", c)):
        others = set().union(*(set(p) for n, p in (("A", a), ("B", b), ("C", c)) if n != m))
        novel = [p for p in pairs if p not in others]
        assert report[m].novel_impressions == len(novel)
    # relabelling models permutes the report and changes nothing else
    swapped = novelty_report({"X": logs["B"], "Y": logs["A"], "Z": logs["C"]})
    assert swapped["X"] == report["B"] and swapped["Y"] == report["A"]


def bucket_logs(rates, n_ctx=50, per_ctx=40, seed=0):
    rng = np.random.default_rng(seed)
    scores = {f"c{j:03d}": float(s) for j, s in enumerate(rng.uniform(size=n_ctx))}
    logs = {}
    for model, rate in rates.items():
        logs[model] = [imp("u", f"i{n}", bool(rng.random() < rate(scores[c])), c)
                       for c in scores for n in range(per_ctx)]
    return logs, scores


def test_identical_engagement_gives_zero_gain():
    logs, scores = bucket_logs({"serendip": lambda s: 0.5})
    logs["exploit"] = list(logs["serendip"])
    gains = bucket_analysis(logs, scores, 5)
    assert [g.gain for g in gains] == [0.0] * 5
    assert [g.n_contexts for g in gains] == [10] * 5
    assert all(gains[j].score_min >= gains[j + 1].score_max for j in range(4))


def test_single_bucket_is_global_ratio():
    logs, scores = bucket_logs({"serendip": lambda s: 0.4 + 0.4 * s, "exploit": lambda s: 0.4})
    (g,) = bucket_analysis(logs, scores, 1)
    t = np.mean([i.positive for i in logs["serendip"]])
    b = np.mean([i.positive for i in logs["exploit"]])
    assert g.gain == pytest.approx(t / b - 1)


def test_buckets_skip_unscored_and_write_csv(tmp_path):
    logs, scores = bucket_logs({"serendip": lambda s: 0.6, "exploit": lambda s: 0.3}, n_ctx=12)
    scores["c000"] = None
    gains = bucket_analysis(logs, scores, 3)
    assert sum(g.n_contexts for g in gains) == 11
    write_bucket_csv(gains, tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert [int(r["bucket"]) for r in rows] == [1, 2, 3]
    with pytest.raises(ValueError):
        bucket_analysis(logs, scores, 0)


def test_zero_baseline_rate_gives_nan():
    logs, scores = bucket_logs({"serendip": lambda s: 0.5, "exploit": lambda s: 0.0}, n_ctx=5)
    assert all(math.isnan(g.gain) for g in bucket_analysis(logs, scores, 2))


def test_interleave():
    assert interleave([["a", "b", "c"], ["b", "d"], []]) == ["a", "b", "d", "c"]


def toy_policies(tree):
    """One policy per label: same leaf, sibling leaf, far-away leaf."""
    leaves = tree.level_nodes(3)

    def similar(ctx, k):
        return [m for m in tree.members(tree.item_ancestor(ctx, 3)) if m != ctx][:k]

    def serendip(ctx, k):
        return tree.members(sibling_target(tree, ctx))[:k]

    def unrelated(ctx, k):
        top = tree.item_ancestor(ctx, 2)
        far = next(n for n in leaves if n.parent != top)
        return far.members[:k]

    return {"similar": similar, "serendip": serendip, "unrelated": unrelated}


def test_simulation_is_deterministic(world, world_tree):
    cfg = SimConfig(n_users=20, n_steps=300, seed=4)
    a = simulate(world.catalog, world_tree, toy_policies(world_tree), cfg)
    b = simulate(world.catalog, world_tree, toy_policies(world_tree), cfg)
    assert a.log.records == b.log.records and a.impressions == b.impressions
    c = simulate(world.catalog, world_tree, toy_policies(world_tree), SimConfig(
        n_users=20, n_steps=300, seed=5))
    assert c.log.records != a.log.records


def test_equal_probabilities_are_indistinguishable(world, world_tree):
    p = 0.4
    cfg = SimConfig(n_users=50, n_steps=3000, p_similar=p, p_serendip=p, p_unrelated=p, seed=1)
    res = simulate(world.catalog, world_tree, toy_policies(world_tree), cfg)
    for model, imps in res.impressions.items():
        n = len(imps)
        rate = sum(i.positive for i in imps) / n
        assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n), model


def test_label_rates_converge(world, world_tree):
    cfg = SimConfig(n_users=50, n_steps=4000, seed=2)
    res = simulate(world.catalog, world_tree, toy_policies(world_tree), cfg)
    by_label = defaultdict(list)
    for imps in res.impressions.values():
        for i in imps:
            by_label[i.label].append(i.positive)
    want = {Label.SIMILAR.value: cfg.p_similar, Label.SERENDIPITOUS.value: cfg.p_serendip,
            Label.UNRELATED.value: cfg.p_unrelated}
    for label, p in want.items():
        n = len(by_label[label])
        assert n > 1000
        assert abs(np.mean(by_label[label]) - p) <= 4 * math.sqrt(p * (1 - p) / n), label


def test_impressions_round_trip(tmp_path, world, world_tree):
    res = simulate(world.catalog, world_tree, toy_policies(world_tree),
                   SimConfig(n_users=5, n_steps=30))
    res.save_impressions(tmp_path / "imp.jsonl")
    assert load_impressions(tmp_path / "imp.jsonl") == res.impressions


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(p_serendip=1.2).validate()
    with pytest.raises(ValueError):
        SimConfig(k=0).validate()
    assert SimConfig(visual_boost=1.0).engagement_probability(Label.SERENDIPITOUS, 0.9) == 1.0
    assert SimConfig().engagement_probability(Label.SERENDIPITOUS, None) == 0.45
