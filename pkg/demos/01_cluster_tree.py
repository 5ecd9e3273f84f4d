"""
Building the semantic cluster tree
==================================

A seeded synthetic catalog is grouped into a 4-level tree (4 children per
node). Every node gets a short description built from member titles.
"""

import numpy as np

from serendip.clustertree import TreeConfig, assign_item, balance_violations, build_tree
from serendip.synth import generate_catalog

world = generate_catalog(n_items=800, dimension=16, seed=1)
catalog = world.catalog
print(f"{len(catalog)} items, {catalog.dimension}-d unit topic vectors")

# %%
# Balanced spherical k-means, applied top-down. Siblings carry roughly equal
# traffic: the heaviest child may exceed the lightest by at most 25 %.
tree = build_tree(catalog, TreeConfig(seed=1))
for level in range(tree.levels):
    nodes = tree.level_nodes(level)
    sizes = [len(n.members) for n in nodes]
    print(f"level {level}: {len(nodes):3d} nodes, members min/max {min(sizes)}/{max(sizes)}")
print("balance violations:", balance_violations(tree))

# %%
# Descriptions are unique across the tree, so text can be mapped back to a node.
for node in tree.level_nodes(1):
    print(node.node_id, "->", node.description)
leaf = tree.level_nodes(3)[0]
print(leaf.node_id, "->", leaf.description)

# %%
# New items are placed by greedy descent on centroid similarity.
item = catalog[catalog.ids[7]]
noisy = item.topic_vector + np.random.default_rng(0).normal(scale=0.05, size=catalog.dimension)
probe = type(item)("probe", item.title, noisy / np.linalg.norm(noisy))
print("stored path:  ", tree.path(item.item_id))
print("assigned path:", assign_item(tree, probe))
