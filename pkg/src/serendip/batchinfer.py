"""Coverage-targeted corpus selection and incremental batch planning.

A run plans only items missing from the previous cache; everything else
is copied. The cache is invalidated when the tree version or the planner
configuration changes.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backends import GenerationBackend
from .clustertree import ClusterTree
from .corpus import InteractionLog, ItemCatalog, atomic_open, impression_counts
from .planner import PlannerConfig, PlanningError, PlanResult, ResolutionMethod, plan_cluster

logger = logging.getLogger(__name__)


class StaleCacheError(RuntimeError):
    """The cache was built against a different tree version."""


@dataclass
class CorpusSelection:
    selected: list[str]
    achieved_coverage: float
    target: float
    reachable: bool = True


def popularity_order(catalog: ItemCatalog) -> list[str]:
    """Item ids by traffic weight descending, ties by id ascending."""
    return sorted(catalog.ids, key=lambda i: (-catalog[i].traffic_weight, i))


def select_corpus(catalog: ItemCatalog, log: InteractionLog,
                  target_coverage: float = 0.8) -> CorpusSelection:
    """Shortest popularity prefix whose impression coverage reaches the target.

    When even the full catalog falls short, all items are returned with
    ``reachable=False``.
    """
    if not 0.0 <= target_coverage <= 1.0:
        raise ValueError("target_coverage must be in [0, 1]")
    order = popularity_order(catalog)
    total = len(log)
    if target_coverage == 0.0:
        return CorpusSelection([], 0.0, target_coverage)
    counts = impression_counts(log)
    hit = 0
    for n, item_id in enumerate(order, 1):
        hit += counts.get(item_id, 0)
        coverage = hit / total if total else 0.0
        if coverage >= target_coverage:
            return CorpusSelection(order[:n], coverage, target_coverage)
    coverage = hit / total if total else 0.0
    logger.warning("target coverage %.3f unreachable; full catalog covers %.3f",
                   target_coverage, coverage)
    return CorpusSelection(order, coverage, target_coverage, reachable=False)


@dataclass
class RunRecord:
    run_id: int
    processed_count: int
    reused_count: int
    failed_count: int = 0
    backend_calls: int = 0
    pruned_count: int = 0
    full_rebuild: bool = False
    wall_time: float = 0.0


@dataclass
class PlanCache:
    corpus_version: int
    tree_version: int
    entries: dict[str, PlanResult] = field(default_factory=dict)
    run_log: list[RunRecord] = field(default_factory=list)
    config_fingerprint: str = ""

    def same_entries(self, other: "PlanCache") -> bool:
        return ({k: v.to_dict() for k, v in self.entries.items()}
                == {k: v.to_dict() for k, v in other.entries.items()})

    def to_dict(self) -> dict:
        return {
            "corpus_version": self.corpus_version,
            "tree_version": self.tree_version,
            "config_fingerprint": self.config_fingerprint,
            "entries": {k: self.entries[k].to_dict() for k in sorted(self.entries)},
            "run_log": [vars(r) for r in self.run_log],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PlanCache":
        return cls(
            corpus_version=int(doc["corpus_version"]),
            tree_version=int(doc["tree_version"]),
            entries={k: PlanResult.from_dict(k, v) for k, v in doc["entries"].items()},
            run_log=[RunRecord(**r) for r in doc.get("run_log", [])],
            config_fingerprint=doc.get("config_fingerprint", ""),
        )


def store_cache(cache: PlanCache, path: str | Path) -> None:
    """Write atomically: readers see the old file or the new one, never a mix."""
    with atomic_open(path) as fh:
        json.dump(cache.to_dict(), fh)


def load_cache(path: str | Path, tree_version: Optional[int] = None) -> PlanCache:
    with open(path, encoding="utf-8") as fh:
        cache = PlanCache.from_dict(json.load(fh))
    if tree_version is not None and cache.tree_version != tree_version:
        raise StaleCacheError(
            f"{path}: cache built for tree version {cache.tree_version}, "
            f"current tree is version {tree_version}; rerun serve-batch without --incremental")
    return cache


def _plan_safe(backend: GenerationBackend, tree: ClusterTree, catalog: ItemCatalog,
               item_id: str, config: PlannerConfig) -> PlanResult:
    try:
        return plan_cluster(backend, tree, catalog[item_id], config)
    except PlanningError as exc:
        return PlanResult(item_id, "", resolution_method=ResolutionMethod.UNRESOLVED,
                          error=str(exc))


def run_batch(config: PlannerConfig, backend: GenerationBackend, tree: ClusterTree,
              selection: CorpusSelection | list[str], catalog: ItemCatalog,
              previous: Optional[PlanCache] = None, workers: int = 1,
              compact: bool = False) -> PlanCache:
    """Plan every selected item not already in `previous`.

    Entries of `previous` are reused only when its tree version and
    config fingerprint match; otherwise the run is a full rebuild. Items
    that left the selection stay cached unless `compact` is set. Backend
    failures become ``UNRESOLVED`` entries with an ``error`` note.
    """
    started = time.perf_counter()
    selected = selection.selected if isinstance(selection, CorpusSelection) else list(selection)
    fingerprint = config.fingerprint()
    reusable = (previous is not None and previous.tree_version == tree.version
                and previous.config_fingerprint == fingerprint)
    if previous is not None and not reusable:
        logger.info("previous cache invalidated (tree %s->%s, config match %s)",
                    previous.tree_version, tree.version,
                    previous.config_fingerprint == fingerprint)
    entries = dict(previous.entries) if reusable else {}
    todo = sorted(i for i in set(selected) if i not in entries)
    reused = sum(1 for i in set(selected) if i in entries)
    pruned = 0
    if compact:
        keep = set(selected)
        pruned = sum(1 for k in entries if k not in keep)
        entries = {k: v for k, v in entries.items() if k in keep}

    calls_before = backend.call_counter
    if workers > 1 and todo and backend.concurrent_safe:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda i: _plan_safe(backend, tree, catalog, i, config), todo))
    else:
        results = [_plan_safe(backend, tree, catalog, i, config) for i in todo]
    for r in results:
        entries[r.context_item_id] = r
    failed = sum(1 for r in results if r.error)

    base_version = previous.corpus_version if previous is not None else 0
    changed = bool(todo) or pruned > 0 or not reusable
    run_log = list(previous.run_log) if previous is not None else []
    run_log.append(RunRecord(
        run_id=len(run_log) + 1,
        processed_count=len(todo),
        reused_count=reused,
        failed_count=failed,
        backend_calls=backend.call_counter - calls_before,
        pruned_count=pruned,
        full_rebuild=not reusable,
        wall_time=round(time.perf_counter() - started, 6),
    ))
    if failed:
        logger.warning("%d of %d items failed to plan", failed, len(todo))
    return PlanCache(
        corpus_version=base_version + 1 if changed else base_version,
        tree_version=tree.version,
        entries=dict(sorted(entries.items())),
        run_log=run_log,
        config_fingerprint=fingerprint,
    )
