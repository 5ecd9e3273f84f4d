"""Serendipitous recommendation with a semantic cluster tree and a cluster planner.

Typical flow: load a catalog and interaction log (`corpus`), build the
tree (`clustertree`), mine serendipitous transitions and curate training
data (`serendipity`), plan a target cluster per item (`planner`,
`batchinfer`), then retrieve inside the planned cluster (`retriever`).
`evalsim` holds the offline metrics and the user simulator.
"""

from .backends import (BackendError, DelayedBackend, GenerationBackend, NoisyBackend,
                       OracleBackend, RemoteBackend, ReplayBackend)
from .batchinfer import (CorpusSelection, PlanCache, StaleCacheError, load_cache, run_batch,
                         select_corpus, store_cache)
from .clustertree import (ClusterNode, ClusterTree, TreeConfig, TreeError, assign_item,
                          build_tree)
from .corpus import (CorpusError, InteractionLog, InteractionRecord, Item, ItemCatalog,
                     impression_coverage, load_interactions, load_items)
from .evalsim import SimConfig, bucket_analysis, novelty_report, simulate
from .planner import (PlannerConfig, PlanningError, PlanResult, PromptError, PromptType,
                      ResolutionPolicy, assemble_prompt, plan_cluster)
from .retriever import (CooccurrenceModel, NoPlanError, recommend_exploit,
                        recommend_restricted, train_cooccurrence)
from .serendipity import (Label, SatisfactionStat, classify_pair, curate_training_data,
                          mine_pairs)

__version__ = "0.1.0"
