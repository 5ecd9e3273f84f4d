"""
Simulated users: novelty and engagement by score bucket
=======================================================

Synthetic users browse from a few preferred leaf clusters. Each step the
competing policies' lists are interleaved and the user engages with a
probability set by how the shown item relates to the context item.
"""

import math

from serendip.backends import OracleBackend
from serendip.batchinfer import run_batch, select_corpus
from serendip.clustertree import TreeConfig, build_tree
from serendip.evalsim import SimConfig, baseline_policies, bucket_analysis, novelty_report, simulate
from serendip.planner import PlannerConfig
from serendip.retriever import train_cooccurrence
from serendip.serendipity import sibling_target
from serendip.synth import generate_catalog, generate_interactions

world = generate_catalog(n_items=800, dimension=16, seed=1)
catalog = world.catalog
tree = build_tree(catalog, TreeConfig(seed=1))
log = generate_interactions(world, n_events=8000, n_users=150, seed=1)
backend = OracleBackend({}, lambda i: tree.nodes[sibling_target(tree, i)].description)
cache = run_batch(PlannerConfig(), backend, tree, select_corpus(catalog, log, 0.8), catalog)
model = train_cooccurrence(log, catalog)

# %%
sim = SimConfig(n_users=150, n_steps=4000, seed=0)
result = simulate(catalog, tree, baseline_policies(model, tree, cache, sim.seed), sim)
print(f"{'policy':14s} {'impr':>6s} {'novel':>6s} {'positive':>8s}")
for name, row in novelty_report(result.impressions).items():
    print(f"{name:14s} {row.impressions:6d} {row.novel_ratio:6.3f} {row.positive_feedback_ratio:8.3f}")

# %%
# With a visual boost, serendipitous engagement grows with the context item's
# visually-interesting score, and so does the gain over the exploit policy.
boosted = SimConfig(n_users=150, n_steps=8000, p_serendip=0.2, visual_boost=0.7, seed=0)
result = simulate(catalog, tree, baseline_policies(model, tree, cache, 0), boosted)
scores = {i.item_id: i.visually_interesting_score for i in catalog}
for g in bucket_analysis(result.impressions, scores, n_buckets=5):
    gain = "n/a" if math.isnan(g.gain) else f"{g.gain:+.3f}"
    print(f"bucket {g.bucket} scores [{g.score_min:.2f}, {g.score_max:.2f}] gain {gain}")
