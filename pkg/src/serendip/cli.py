"""Command line entry point: one subcommand per pipeline stage.

Every command prints a single JSON summary line on stdout. Exit codes:
0 success, 1 validation error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from .backends import (BackendError, GenerationBackend, NoisyBackend, OracleBackend,
                       RemoteBackend, ReplayBackend)
from .batchinfer import StaleCacheError, load_cache, run_batch, select_corpus, store_cache
from .clustertree import ClusterTree, TreeError, balance_violations, build_tree
from .config import ConfigError, PipelineConfig
from .corpus import (CorpusError, InteractionLog, ItemCatalog, atomic_open,
                     load_interactions, load_items, save_interactions, save_items)
from .evalsim import (baseline_policies, bucket_analysis, evaluate_plans, load_impressions,
                      novelty_report, simulate, write_bucket_csv)
from .planner import PlanningError, plan_cluster
from .retriever import DAY, NoPlanError, recommend_exploit, recommend_restricted, train_cooccurrence
from .serendipity import (best_targets, curate_training_data, export_training_file,
                          eval_set, label_counts, load_stats, load_training_file, mine_pairs, save_stats,
                          sibling_target)
from .synth import generate_catalog, generate_interactions

logger = logging.getLogger("serendip")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3
STAGES = ["build-tree", "mine", "curate", "serve-batch", "simulate", "eval"]


class DataError(RuntimeError):
    def __init__(self, message: str, hint: Optional[str] = None):
        super().__init__(message)
        self.hint = hint


class BackendFailure(RuntimeError):
    """Some items failed because the generation backend failed."""

    def __init__(self, summary: dict):
        super().__init__(f"{summary.get('backend_failures', 0)} backend failures")
        self.summary = summary


def emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


# -- loading helpers --------------------------------------------------------

def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing input {path}", hint)
    return path


def _catalog(cfg: PipelineConfig) -> ItemCatalog:
    return load_items(_need(cfg.path("items"), "run `serendip synth` or point paths.items at a file"),
                      cfg.dimension)


def _log(cfg: PipelineConfig, catalog: ItemCatalog) -> InteractionLog:
    return load_interactions(_need(cfg.path("interactions"), "set paths.interactions"), catalog)


def _tree(cfg: PipelineConfig, catalog: Optional[ItemCatalog] = None) -> ClusterTree:
    tree = ClusterTree.load(_need(cfg.path("tree"), "run `serendip build-tree`"))
    if catalog is not None:
        missing = [i for i in catalog.ids if i not in tree]
        if missing:
            raise DataError(f"{len(missing)} catalog items are not in the tree (e.g. {missing[0]})",
                            "rerun `serendip build-tree`")
    return tree


def _cache(cfg: PipelineConfig, tree: ClusterTree):
    path = cfg.path("cache")
    if not path.exists():
        raise NoPlanError(f"no plan cache at {path}")
    return load_cache(path, tree_version=tree.version)


def _check_version(found: Optional[int], tree: ClusterTree, what: str, hint: str) -> None:
    if found != tree.version:
        raise DataError(f"{what} was built for tree version {found}, tree is version {tree.version}",
                        hint)


def _oracle_labels(cfg: PipelineConfig, tree: ClusterTree) -> dict[str, str]:
    """Curated targets first, then each context's best mined target."""
    labels: dict[str, str] = {}
    training = cfg.path("training")
    if training.exists():
        header, examples = load_training_file(training)
        _check_version(header.get("tree_version"), tree, str(training), "rerun `serendip curate`")
        labels.update((ex.context_item_id, ex.target_description) for ex in eval_set(examples))
    stats_path = cfg.path("stats")
    if stats_path.exists():
        header, stats = load_stats(stats_path)
        _check_version(header.get("tree_version"), tree, str(stats_path), "rerun `serendip mine`")
        for ctx, cluster in best_targets(stats, min_support=1).items():
            labels.setdefault(ctx, tree.nodes[cluster].description)
    return labels


def make_backend(cfg: PipelineConfig, tree: ClusterTree,
                 labels: Optional[dict[str, str]] = None) -> GenerationBackend:
    """Backend from a spec string: oracle | noisy:q | replay:path | remote:url."""
    kind, _, arg = cfg.backend_spec.partition(":")
    if kind in ("oracle", "noisy"):
        labels = _oracle_labels(cfg, tree) if labels is None else labels
        l, delta = cfg.level, cfg.delta

        def fallback(item_id: str) -> Optional[str]:
            node = sibling_target(tree, item_id, l, delta) if item_id in tree else None
            return tree.nodes[node].description if node else None

        if kind == "oracle":
            return OracleBackend(labels, fallback)
        try:
            q = float(arg)
        except ValueError:
            raise ConfigError(f"planner.backend: noisy needs a rate, e.g. noisy:0.3") from None
        return NoisyBackend(labels, q, seed=int(cfg.get("planner", "backend_seed")),
                            vocabulary=tree.descriptions(cfg.level), fallback=fallback)
    if kind == "replay":
        path = Path(arg)
        path = path if path.is_absolute() else cfg.base_dir / path
        return ReplayBackend.from_file(_need(path, "record generations first"))
    return RemoteBackend(arg, timeout=float(cfg.get("planner", "timeout")))


def _window(log: InteractionLog, days: float) -> InteractionLog:
    if days <= 0 or len(log) == 0:
        return log
    newest = max(r.timestamp for r in log)
    return InteractionLog([r for r in log if r.timestamp >= newest - days * DAY], log.ingest_stats)


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, args) -> dict:
    tree_cfg = cfg.tree
    world = generate_catalog(int(cfg.get("synth", "n_items")), cfg.dimension,
                             tree_cfg.branching, seed=int(cfg.get("synth", "seed")))
    log = generate_interactions(world, int(cfg.get("synth", "n_events")),
                                int(cfg.get("synth", "n_users")), seed=int(cfg.get("synth", "seed")))
    for key in ("items", "interactions"):
        cfg.path(key).parent.mkdir(parents=True, exist_ok=True)
    save_items(world.catalog, cfg.path("items"))
    save_interactions(log, cfg.path("interactions"))
    return {"items": len(world.catalog), "interactions": len(log)}


def cmd_build_tree(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    path = cfg.path("tree")
    previous = None
    if path.exists():
        try:
            previous = ClusterTree.load(path)
        except (ValueError, KeyError) as exc:
            logger.warning("ignoring unreadable tree %s: %s", path, exc)
    tree = build_tree(catalog, cfg.tree, version=previous.version if previous else 1)
    changed = previous is not None and not tree.structure_equal(previous)
    if changed:
        tree.version = previous.version + 1
    tree.save(path)
    # balance is enforced on traffic; item counts are reported alongside
    leaves = [n for n in tree.level_nodes(tree.leaf_level) if not n.is_empty]
    sizes = [len(n.members) for n in leaves]
    masses = [n.traffic_mass for n in leaves]
    return {
        "leaf_items": [min(sizes), max(sizes)],
        "leaf_traffic": [round(min(masses), 6), round(max(masses), 6)],
        "version": tree.version,
        "structure_changed": changed or previous is None,
        "items": len(tree.leaf_assignment),
        "nodes": len(tree.nodes),
        "rejected_items": catalog.ingest_stats.rejected,
        "balance_violations": len(balance_violations(tree)),
        "warnings": tree.warnings,
    }


def cmd_mine(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg, catalog)
    log = _log(cfg, catalog)
    stats = mine_pairs(log, tree, cfg.level, cfg.delta, cfg.alpha)
    save_stats(stats, cfg.path("stats"), tree.version)
    return {
        "tree_version": tree.version,
        "records": len(log),
        "dropped_records": log.dropped,
        "labels": dict(sorted(label_counts(log, tree, cfg.level, cfg.delta).items())),
        "stats": len(stats),
    }


def cmd_curate(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg, catalog)
    header, stats = load_stats(_need(cfg.path("stats"), "run `serendip mine`"))
    _check_version(header.get("tree_version"), tree, "stats file", "rerun `serendip mine`")
    planner = cfg.planner
    examples = curate_training_data(stats, tree, cfg.curate_k, cfg.min_support, cfg.delta,
                                    planner.prompt_type)
    written = export_training_file(examples, tree, catalog, cfg.path("training"), cfg.level,
                                   planner.frames, planner.use_thumbnail)
    return {
        "tree_version": tree.version,
        "curated": len(examples),
        "written": written,
        "skipped_no_visual_input": len(examples) - written,
        "clusters": len({e.target_cluster_id for e in examples}),
    }


def cmd_serve_batch(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg, catalog)
    log = _window(_log(cfg, catalog), cfg.window_days)
    selection = select_corpus(catalog, log, cfg.target_coverage)
    path = cfg.path("cache")
    previous = load_cache(path) if args.incremental and path.exists() else None
    backend = make_backend(cfg, tree)
    cache = run_batch(cfg.planner, backend, tree, selection, catalog, previous,
                      workers=cfg.workers, compact=args.compact)
    store_cache(cache, path)
    run = cache.run_log[-1]
    errors = [e.error for e in cache.entries.values() if e.error]
    backend_failures = sum(1 for e in errors if "backend failed" in e)
    summary = {
        "tree_version": tree.version,
        "corpus_version": cache.corpus_version,
        "selected": len(selection.selected),
        "achieved_coverage": round(selection.achieved_coverage, 6),
        "coverage_reachable": selection.reachable,
        "processed_count": run.processed_count,
        "reused_count": run.reused_count,
        "failed_count": run.failed_count,
        "backend_calls": run.backend_calls,
        "full_rebuild": run.full_rebuild,
        "pruned_count": run.pruned_count,
        "resolved": sum(1 for e in cache.entries.values() if e.resolved_cluster),
        "backend_failures": backend_failures,
        "no_visual_input": len(errors) - backend_failures,
    }
    if backend_failures:
        raise BackendFailure(summary)
    return summary


def cmd_recommend(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg)
    if args.context not in catalog:
        raise DataError(f"unknown context item {args.context!r}")
    if args.k <= 0:
        raise ConfigError("--k must be positive")
    model = train_cooccurrence(_log(cfg, catalog), catalog, cfg.decay)
    if args.mode == "serendip":
        cache = _cache(cfg, tree)
        result = recommend_restricted(model, tree, cache, args.context, args.k, cfg.beta)
    else:
        result = recommend_exploit(model, args.context, args.k, cfg.beta)
    return {"mode": args.mode, **result.to_dict()}


def cmd_simulate(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg, catalog)
    cache = _cache(cfg, tree)
    model = train_cooccurrence(_log(cfg, catalog), catalog, cfg.decay)
    sim = cfg.sim
    result = simulate(catalog, tree, baseline_policies(model, tree, cache, sim.seed, cfg.beta), sim)
    result.save_impressions(cfg.path("impressions"))
    save_interactions(result.log, cfg.path("sim_interactions"))
    novelty = novelty_report(result.impressions)
    return {
        "steps": sim.n_steps,
        "interactions": len(result.log),
        "novelty": {m: vars(n) for m, n in novelty.items()},
    }


def cmd_eval(cfg: PipelineConfig, args) -> dict:
    catalog = _catalog(cfg)
    tree = _tree(cfg, catalog)
    header, examples = load_training_file(_need(cfg.path("training"), "run `serendip curate`"))
    _check_version(header.get("tree_version"), tree, "training file", "rerun `serendip curate`")
    examples = eval_set(examples)
    labels = {ex.context_item_id: ex.target_description for ex in examples}
    backend = make_backend(cfg, tree, labels)
    planner = cfg.planner
    outputs = []
    for ex in examples:
        outputs.append((plan_cluster(backend, tree, catalog[ex.context_item_id], planner),
                        ex.target_description))
    report = evaluate_plans(outputs, tree, cfg.level)
    doc: dict = {
        "tree_version": tree.version,
        "prompt_type": planner.prompt_type.value,
        "backend": cfg.backend_spec.partition(":")[0],
        "backend_calls": backend.call_counter,
        "planner": vars(report),
    }
    imp_path = cfg.path("impressions")
    if imp_path.exists():
        impressions = load_impressions(imp_path)
        if len(impressions) >= 2:
            doc["novelty"] = {m: vars(n) for m, n in novelty_report(impressions).items()}
        if "serendip" in impressions and "exploit" in impressions:
            scores = {i.item_id: i.visually_interesting_score for i in catalog}
            gains = bucket_analysis(impressions, scores, int(cfg.get("eval", "n_buckets")))
            doc["buckets"] = [vars(g) for g in gains]
            if not args.no_csv:
                write_bucket_csv(gains, cfg.path("buckets"))
    with atomic_open(cfg.path("report")) as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "match_rate": report.match_rate,
        "recall": report.recall,
        "examples": report.n_examples,
        "report": str(cfg.path("report")),
        "buckets": "buckets" in doc,
    }


COMMANDS: dict[str, Callable[[PipelineConfig, argparse.Namespace], dict]] = {
    "synth": cmd_synth,
    "build-tree": cmd_build_tree,
    "mine": cmd_mine,
    "curate": cmd_curate,
    "serve-batch": cmd_serve_batch,
    "recommend": cmd_recommend,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
}


def cmd_pipeline(cfg: PipelineConfig, args) -> dict:
    stages = STAGES[STAGES.index(args.from_stage):]
    if args.synth and args.from_stage == STAGES[0]:
        stages = ["synth"] + stages
    done = []
    for stage in stages:
        summary = COMMANDS[stage](cfg, args)
        emit({"command": stage, "status": "ok", **summary})
        done.append(stage)
    return {"stages": done}


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors (exit 1)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="serendip", description=__doc__.splitlines()[0])
    parser.add_argument("-c", "--config", help="INI config file (default: built-in defaults)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", help="write the seeded synthetic catalog and interaction log")
    sub.add_parser("build-tree", help="cluster the catalog into the semantic tree")
    sub.add_parser("mine", help="serendipitous-transition satisfaction stats")
    sub.add_parser("curate", help="top-k contexts per cluster -> training file")

    def batch_flags(p):
        p.add_argument("--target-coverage", type=float)
        p.add_argument("--workers", type=int)
        p.add_argument("--incremental", action="store_true",
                       help="reuse the existing cache and plan only new items")
        p.add_argument("--compact", action="store_true",
                       help="drop cached items that left the selection")

    batch_flags(sub.add_parser("serve-batch", help="plan clusters for the covering corpus"))

    p = sub.add_parser("recommend", help="recommend for one context item")
    p.add_argument("--context", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--mode", choices=["serendip", "exploit"], default="serendip")

    sub.add_parser("simulate", help="seeded user simulation over the baseline policies")

    def eval_flags(p):
        p.add_argument("--no-csv", action="store_true", help="skip the per-bucket CSV")

    eval_flags(sub.add_parser("eval", help="planner metrics, novelty and bucket gains"))

    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--from-stage", choices=STAGES, default=STAGES[0])
    p.add_argument("--synth", action="store_true", help="generate the synthetic dataset first")
    batch_flags(p)
    eval_flags(p)
    return parser


def _overrides(args) -> list[str]:
    out = list(args.set)
    if getattr(args, "target_coverage", None) is not None:
        out.append(f"batch.target_coverage={args.target_coverage}")
    if getattr(args, "workers", None) is not None:
        out.append(f"batch.workers={args.workers}")
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = PipelineConfig.load(args.config, _overrides(args))
        if command != "pipeline":
            args.incremental = getattr(args, "incremental", False)
        run = cmd_pipeline if command == "pipeline" else COMMANDS[command]
        summary = run(cfg, args)
    except ConfigError as exc:
        return _fail(command, EXIT_VALIDATION, exc)
    except BackendFailure as exc:
        emit({"command": command, "status": "partial_failure", **exc.summary})
        return EXIT_BACKEND
    except (BackendError, PlanningError) as exc:
        return _fail(command, EXIT_BACKEND, exc)
    except NoPlanError as exc:
        return _fail(command, EXIT_DATA, exc, "run `serendip serve-batch` first")
    except StaleCacheError as exc:
        return _fail(command, EXIT_DATA, exc, "rerun `serendip serve-batch`")
    except DataError as exc:
        return _fail(command, EXIT_DATA, exc, exc.hint)
    except (CorpusError, TreeError, OSError, ValueError, KeyError) as exc:
        return _fail(command, EXIT_DATA, exc)
    emit({"command": command, "status": "ok", **summary})
    return EXIT_OK


def _fail(command: Optional[str], code: int, exc: BaseException, hint: Optional[str] = None) -> int:
    doc = {"command": command, "status": "error", "exit_code": code,
           "error": f"{type(exc).__name__}: {exc}"}
    if hint:
        doc["hint"] = hint
    emit(doc)
    print(f"serendip: {doc['error']}" + (f" ({hint})" if hint else ""), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
