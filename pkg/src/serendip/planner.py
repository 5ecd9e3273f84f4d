"""Prompt assembly, cluster planning and controlled-generation resolution."""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, Iterable, Optional

from .clustertree import ClusterTree
from .corpus import Item

if TYPE_CHECKING:
    from .backends import GenerationBackend

logger = logging.getLogger(__name__)


class PromptType(str, enum.Enum):
    TEXT_ONLY = "text_only"
    VIDEO_ONLY = "video_only"
    VIDEO_AND_TEXT = "video_and_text"
    VIDEO_COT = "video_cot"

    @property
    def calls(self) -> int:
        """Backend calls needed to plan one item."""
        return 2 if self is PromptType.VIDEO_COT else 1

    @property
    def visual(self) -> bool:
        return self is not PromptType.TEXT_ONLY

    @property
    def textual(self) -> bool:
        return self in (PromptType.TEXT_ONLY, PromptType.VIDEO_AND_TEXT)


class ResolutionMethod(str, enum.Enum):
    EXACT = "exact"
    FALLBACK = "fallback"
    UNRESOLVED = "unresolved"


BLOCK_KINDS = ("title", "cluster_description", "frame_caption", "thumbnail_caption")


class PromptError(ValueError):
    pass


class PlanningError(RuntimeError):
    def __init__(self, item_id: str, message: str):
        super().__init__(f"{item_id}: {message}")
        self.item_id = item_id


@dataclass(frozen=True)
class Block:
    kind: str
    text: str


@dataclass(frozen=True)
class Prompt:
    prompt_type: PromptType
    system_text: str
    context_blocks: tuple[Block, ...]
    instruction_text: str
    item_id: str = ""
    stage: int = 1

    def render(self) -> str:
        lines = [self.system_text, ""]
        lines += [f"[{b.kind}] {b.text}" for b in self.context_blocks]
        lines += ["", self.instruction_text]
        return "\n".join(lines)

    def to_wire(self) -> dict:
        return {
            "prompt_type": self.prompt_type.value,
            "system": self.system_text,
            "blocks": [{"kind": b.kind, "text": b.text} for b in self.context_blocks],
            "instruction": self.instruction_text,
        }


@dataclass(frozen=True)
class ResolutionPolicy:
    """``max_distance=None`` is strict matching; otherwise nearest description
    by normalized edit distance, accepted up to `max_distance`."""

    max_distance: Optional[float] = None

    @classmethod
    def parse(cls, text: str) -> "ResolutionPolicy":
        """``"strict"`` or ``"nearest"`` / ``"nearest:0.25"``."""
        text = text.strip().lower()
        if text == "strict":
            return cls(None)
        if text.startswith("nearest"):
            _, _, value = text.partition(":")
            return cls(float(value) if value else 0.25)
        raise ValueError(f"unknown resolution policy {text!r}")

    def __str__(self) -> str:
        return "strict" if self.max_distance is None else f"nearest:{self.max_distance:g}"


STRICT = ResolutionPolicy(None)


@dataclass
class PlannerConfig:
    prompt_type: PromptType = PromptType.VIDEO_COT
    frames: int = 4
    use_thumbnail: bool = False
    policy: ResolutionPolicy = STRICT
    level: Optional[int] = None
    max_retries: int = 2

    def fingerprint(self, templates_version: Optional[str] = None) -> str:
        tv = templates_version or load_templates()["version"]
        return (f"{self.prompt_type.value}|f={self.frames}|thumb={int(self.use_thumbnail)}"
                f"|{self.policy}|level={self.level}|templates={tv}")


@dataclass
class PlanResult:
    context_item_id: str
    raw_generation: str
    rationale: Optional[str] = None
    resolved_cluster: Optional[str] = None
    exact_match: bool = False
    resolution_method: ResolutionMethod = ResolutionMethod.UNRESOLVED
    error: Optional[str] = None

    def to_dict(self) -> dict:
        out = {
            "raw_generation": self.raw_generation,
            "exact_match": self.exact_match,
            "resolution_method": self.resolution_method.value,
        }
        if self.rationale is not None:
            out["rationale"] = self.rationale
        if self.resolved_cluster is not None:
            out["resolved_cluster"] = self.resolved_cluster
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_dict(cls, item_id: str, row: dict) -> "PlanResult":
        return cls(
            context_item_id=item_id,
            raw_generation=row["raw_generation"],
            rationale=row.get("rationale"),
            resolved_cluster=row.get("resolved_cluster"),
            exact_match=bool(row["exact_match"]),
            resolution_method=ResolutionMethod(row["resolution_method"]),
            error=row.get("error"),
        )


@lru_cache(maxsize=1)
def load_templates() -> dict:
    text = resources.files("serendip").joinpath("templates.json").read_text(encoding="utf-8")
    return json.loads(text)


def sample_frames(item: Item, f: int) -> list[str]:
    """`f` uniformly spaced captions at indices ``floor(i * N / f)``.

    Items with fewer than `f` captions return all of them.
    """
    if f < 1:
        raise ValueError("f must be >= 1")
    captions = item.frame_captions
    n = len(captions)
    if n <= f:
        return list(captions)
    return [captions[i * n // f] for i in range(f)]


def planning_level(tree: ClusterTree, level: Optional[int]) -> int:
    return tree.leaf_level if level is None else level


def assemble_prompt(item: Item, tree: ClusterTree, prompt_type: PromptType, f: int = 4,
                    use_thumbnail: bool = False, level: Optional[int] = None) -> Prompt:
    """Build the single-stage prompt for `prompt_type`.

    For ``VIDEO_COT`` this is the first (summary) stage; `cot_followup`
    builds the second one.
    """
    prompt_type = PromptType(prompt_type)
    templates = load_templates()
    blocks: list[Block] = []
    if prompt_type.textual:
        blocks.append(Block("title", item.title))
        if item.item_id in tree:
            node = tree.item_ancestor(item.item_id, planning_level(tree, level))
            blocks.append(Block("cluster_description", tree.nodes[node].description))
    if prompt_type.visual:
        if use_thumbnail:
            visual = [Block("thumbnail_caption", item.thumbnail_caption)] \
                if item.thumbnail_caption else []
        else:
            visual = [Block("frame_caption", c) for c in sample_frames(item, f)]
        if not visual:
            source = "thumbnail" if use_thumbnail else "frame captions"
            raise PromptError(f"{item.item_id}: {prompt_type.value} prompt needs {source}")
        blocks.extend(visual)
    key = "video_cot_stage1" if prompt_type is PromptType.VIDEO_COT else prompt_type.value
    return Prompt(prompt_type, templates["system"], tuple(blocks),
                  templates["instructions"][key], item.item_id, 1)


def cot_followup(first: Prompt, summary: str) -> Prompt:
    """Second chain-of-thought stage, carrying the stage-1 summary verbatim."""
    instruction = load_templates()["instructions"]["video_cot_stage2"].replace("{summary}", summary)
    return Prompt(first.prompt_type, first.system_text, first.context_blocks, instruction,
                  first.item_id, 2)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_distance(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return 0.0 if longest == 0 else levenshtein(a, b) / longest


def resolve_generation(tree: ClusterTree, text: str, policy: ResolutionPolicy = STRICT,
                       level: Optional[int] = None) -> tuple[Optional[str], ResolutionMethod]:
    """Map generated text to a node at the planning level.

    Exact trimmed matches always win. Under a nearest policy the closest
    description by normalized Levenshtein distance is accepted if within
    the threshold; equal distances go to the lexically smaller description.
    """
    index = tree.description_index(planning_level(tree, level))
    key = text.strip()
    if key in index:
        return index[key], ResolutionMethod.EXACT
    if policy.max_distance is None or not index:
        return None, ResolutionMethod.UNRESOLVED
    dist, desc = min((normalized_distance(key, d), d) for d in index)
    if dist <= policy.max_distance:
        return index[desc], ResolutionMethod.FALLBACK
    return None, ResolutionMethod.UNRESOLVED


def _generate(backend: "GenerationBackend", prompt: Prompt, retries: int) -> str:
    from .backends import BackendError

    for attempt in range(retries + 1):
        try:
            return backend.generate(prompt)
        except BackendError as exc:
            if attempt == retries:
                raise PlanningError(prompt.item_id, f"backend failed: {exc}") from exc
            logger.info("retrying %s stage %d after: %s", prompt.item_id, prompt.stage, exc)
    raise AssertionError("unreachable")


def plan_cluster(backend: "GenerationBackend", tree: ClusterTree, item: Item,
                 config: Optional[PlannerConfig] = None) -> PlanResult:
    """Ask the backend for a serendipitous cluster for `item` and resolve it.

    Unresolvable text yields an ``UNRESOLVED`` result rather than an error;
    only backend failures (after retries) raise `PlanningError`.
    """
    config = config or PlannerConfig()
    try:
        prompt = assemble_prompt(item, tree, config.prompt_type, config.frames,
                                 config.use_thumbnail, config.level)
    except PromptError as exc:
        raise PlanningError(item.item_id, str(exc)) from exc
    rationale = None
    if config.prompt_type is PromptType.VIDEO_COT:
        rationale = _generate(backend, prompt, config.max_retries)
        prompt = cot_followup(prompt, rationale)
    raw = _generate(backend, prompt, config.max_retries)
    node, method = resolve_generation(tree, raw, config.policy, config.level)
    return PlanResult(item.item_id, raw, rationale, node, method is ResolutionMethod.EXACT, method)


def plan_many(backend: "GenerationBackend", tree: ClusterTree, items: Iterable[Item],
              config: Optional[PlannerConfig] = None, workers: int = 1) -> dict[str, PlanResult]:
    """Plan several items, concurrently when ``workers > 1``; keyed by item id."""
    items = list(items)
    if workers <= 1 or not backend.concurrent_safe:
        results = [plan_cluster(backend, tree, it, config) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda it: plan_cluster(backend, tree, it, config), items))
    return {r.context_item_id: r for r in sorted(results, key=lambda r: r.context_item_id)}

