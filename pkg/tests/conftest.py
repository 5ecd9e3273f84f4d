from __future__ import annotations

import numpy as np
import pytest

from serendip.clustertree import TreeConfig, build_tree
from serendip.corpus import Item, ItemCatalog
from serendip.synth import generate_catalog, generate_interactions

WORDS = ["chess", "piano", "surf", "bread", "drone", "knit", "opera", "rally", "yoga", "comet"]


def random_catalog(n: int, dim: int = 8, seed: int = 0, frames: int = 5) -> ItemCatalog:
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        words = rng.choice(WORDS, size=2, replace=False)
        items.append(Item(
            item_id=f"i{i:03d}",
            title=" ".join(words),
            topic_vector=rng.normal(size=dim),
            traffic_weight=float(rng.uniform(1, 10)),
            frame_captions=[f"{words[0]} frame {j}" for j in range(frames)],
            thumbnail_caption=f"thumb {words[1]}",
            visually_interesting_score=float(rng.uniform()),
        ))
    return ItemCatalog.from_items(items, dim)


def tree_over(n: int, seed: int = 0, branching=(2, 2, 2)):
    catalog = random_catalog(n, seed=seed)
    return catalog, build_tree(catalog, TreeConfig(levels=len(branching) + 1,
                                                   branching=branching, seed=seed))


@pytest.fixture(scope="session")
def world():
    return generate_catalog(n_items=600, dimension=16, seed=3)


@pytest.fixture(scope="session")
def world_tree(world):
    return build_tree(world.catalog, TreeConfig(seed=3))


@pytest.fixture(scope="session")
def world_log(world):
    return generate_interactions(world, n_events=6000, n_users=120, seed=3)


@pytest.fixture(scope="session")
def big_world():
    """The default 2,000-item synthetic world."""
    return generate_catalog(seed=0)


@pytest.fixture(scope="session")
def big_tree(big_world):
    return build_tree(big_world.catalog, TreeConfig(seed=0))


@pytest.fixture(scope="session")
def big_log(big_world):
    return generate_interactions(big_world, n_events=20_000, seed=0)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
