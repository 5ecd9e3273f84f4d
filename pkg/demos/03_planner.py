"""
Planning a serendipitous cluster for one item
=============================================

The planner turns an item into a prompt, asks a generation backend for a
cluster description and maps the text back to a tree node. Backends here are
offline stand-ins: an oracle that answers with a known label and a noisy
variant that garbles a fixed share of its answers.
"""

from serendip.backends import NoisyBackend, OracleBackend
from serendip.clustertree import TreeConfig, build_tree
from serendip.evalsim import evaluate_plans
from serendip.planner import (PlannerConfig, PromptType, ResolutionPolicy, assemble_prompt,
                              plan_cluster, plan_many)
from serendip.serendipity import sibling_target
from serendip.synth import generate_catalog

world = generate_catalog(n_items=800, dimension=16, seed=1)
catalog = world.catalog
tree = build_tree(catalog, TreeConfig(seed=1))
item = next(i for i in catalog if len(i.frame_captions) >= 6)

# %%
# The four prompt types. Video prompts see frame captions only.
for pt in PromptType:
    prompt = assemble_prompt(item, tree, pt)
    print(f"--- {pt.value}: {[b.kind for b in prompt.context_blocks]}")
print(assemble_prompt(item, tree, PromptType.VIDEO_COT).render())

# %%
def label_of(item_id):
    return tree.nodes[sibling_target(tree, item_id)].description


oracle = OracleBackend({}, label_of)
result = plan_cluster(oracle, tree, item)  # VIDEO_COT: summary first, then the answer
print("backend calls:", oracle.call_counter)
print("rationale:", result.rationale)
print("plan:", result.resolved_cluster, result.resolution_method.value)

# %%
# Noisy answers: strict resolution drops them, nearest resolution may rescue
# small typos. Match rate counts vocabulary hits, recall counts correct hits.
items = [i for i in catalog if i.frame_captions][:400]
truth = {i.item_id: label_of(i.item_id) for i in items}
for policy in ("strict", "nearest"):
    backend = NoisyBackend(truth, 0.3, seed=0, vocabulary=tree.descriptions(3))
    config = PlannerConfig(policy=ResolutionPolicy.parse(policy))
    plans = plan_many(backend, tree, items, config)
    report = evaluate_plans([(plans[i], truth[i]) for i in truth], tree)
    resolved = sum(p.resolved_cluster is not None for p in plans.values())
    right = sum(p.resolved_cluster == sibling_target(tree, i) for i, p in plans.items())
    print(f"{policy:8s} match {report.match_rate:.3f} recall {report.recall:.3f} "
          f"resolved {resolved}/{len(items)} correct cluster {right}/{len(items)}")
