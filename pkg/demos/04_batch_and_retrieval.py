"""
Batch planning and cluster-restricted retrieval
===============================================

Plans are computed offline for the smallest set of popular items that
covers 80 % of logged impressions, then reused until the tree changes.
At serving time the recommender only looks inside the planned cluster.
"""

from serendip.backends import OracleBackend
from serendip.batchinfer import run_batch, select_corpus
from serendip.clustertree import TreeConfig, build_tree
from serendip.planner import PlannerConfig
from serendip.retriever import recommend_exploit, recommend_restricted, train_cooccurrence
from serendip.serendipity import Label, classify_pair, sibling_target
from serendip.synth import generate_catalog, generate_interactions

world = generate_catalog(n_items=800, dimension=16, seed=1)
catalog = world.catalog
tree = build_tree(catalog, TreeConfig(seed=1))
log = generate_interactions(world, n_events=8000, n_users=150, seed=1)

selection = select_corpus(catalog, log, 0.8)
print(f"{len(selection.selected)} of {len(catalog)} items cover "
      f"{selection.achieved_coverage:.1%} of impressions")

# %%
backend = OracleBackend({}, lambda i: tree.nodes[sibling_target(tree, i)].description)
config = PlannerConfig()
half = selection.selected[: len(selection.selected) // 2]
cache = run_batch(config, backend, tree, half, catalog, workers=4)
cache = run_batch(config, backend, tree, selection, catalog, previous=cache, workers=4)
for run in cache.run_log:
    print(f"run {run.run_id}: processed {run.processed_count}, reused {run.reused_count}, "
          f"calls {run.backend_calls}, failed {run.failed_count}")

# %%
model = train_cooccurrence(log, catalog)
context = next(i for i in selection.selected if cache.entries[i].resolved_cluster)
planned = recommend_restricted(model, tree, cache, context, k=5)
plain = recommend_exploit(model, context, k=5)
print("context:", context, "| own cluster:", tree.nodes[tree.item_ancestor(context, 3)].description)
print("planned cluster:", planned.description)
for name, result in (("serendip", planned), ("exploit", plain)):
    kinds = [classify_pair(tree, context, i).value for i in result.item_ids]
    print(f"{name:9s}", list(zip(result.item_ids, kinds)))
assert all(classify_pair(tree, context, i) is not Label.SIMILAR for i in planned.item_ids)
