"""
Mining serendipitous transitions
================================

A pair (context, next) is serendipitous when the two items sit in different
level-3 clusters under the same level-2 parent. We count how often users were
satisfied after such jumps, keep the best contexts per target cluster and
write a fine-tuning file.
"""

from collections import Counter
from pathlib import Path
import tempfile

from serendip.clustertree import TreeConfig, build_tree
from serendip.serendipity import (Label, classify_pair, curate_training_data,
                                  export_training_file, load_training_file, mine_pairs)
from serendip.synth import generate_catalog, generate_interactions

world = generate_catalog(n_items=800, dimension=16, seed=1)
tree = build_tree(world.catalog, TreeConfig(seed=1))
log = generate_interactions(world, n_events=8000, n_users=150, seed=1)

labels = Counter(classify_pair(tree, r.context_item_id, r.next_item_id).value
                 for r in log if r.context_item_id != r.next_item_id)
print("transition labels:", dict(labels))

# %%
stats = mine_pairs(log, tree)
top = sorted(stats, key=lambda s: (-s.total_count, s.context_item_id))[:5]
for s in top:
    print(f"{s.context_item_id} -> {s.target_cluster_id}: {s.positive_count}/{s.total_count}")

# %%
# Top 10 contexts per cluster; rate first, then support, then id.
examples = curate_training_data(stats, tree, k=10, min_support=3)
per_cluster = Counter(e.target_cluster_id for e in examples)
print(f"{len(examples)} examples over {len(per_cluster)} clusters, "
      f"largest cluster has {max(per_cluster.values())}")
assert all(classify_pair(tree, e.context_item_id, tree.nodes[e.target_cluster_id].members[0])
           is Label.SERENDIPITOUS for e in examples)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "training.jsonl"
    written = export_training_file(examples, tree, world.catalog, path)
    header, back = load_training_file(path)
    print(f"wrote {written} rows; vocabulary of {len(header['descriptions'])} descriptions")
    print(path.read_text().splitlines()[1][:300], "...")
