"""Pipeline configuration: one INI file, overridable from the command line.

Relative paths are resolved against the directory holding the config
file. Every section and key is optional; see ``DEFAULTS``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .clustertree import TreeConfig
from .evalsim import SimConfig
from .planner import PlannerConfig, PromptType, ResolutionPolicy
from .retriever import DEFAULT_BETA, DEFAULT_DECAY


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "paths": {
        "items": "items.jsonl",
        "interactions": "interactions.jsonl",
        "tree": "tree.json",
        "stats": "stats.jsonl",
        "training": "training.jsonl",
        "cache": "cache.json",
        "report": "report.json",
        "buckets": "buckets.csv",
        "impressions": "impressions.jsonl",
        "sim_interactions": "sim_interactions.jsonl",
    },
    "data": {"dimension": "32"},
    "synth": {"n_items": "2000", "n_events": "20000", "n_users": "300", "seed": "0"},
    "tree": {"levels": "4", "branching": "4,4,4", "balance_tolerance": "0.25", "seed": "0"},
    "serendipity": {"level": "3", "delta": "1", "k": "10", "min_support": "5", "alpha": "0"},
    "planner": {
        "prompt_type": "video_cot", "frames": "4", "use_thumbnail": "false",
        "resolution": "strict", "backend": "oracle", "backend_seed": "0",
        "timeout": "30", "retries": "2",
    },
    "batch": {"target_coverage": "0.8", "workers": "4", "window_days": "0"},
    "retriever": {"decay": repr(DEFAULT_DECAY), "beta": repr(DEFAULT_BETA)},
    "sim": {
        "n_users": "200", "n_steps": "10000", "k": "5", "p_similar": "0.30",
        "p_serendip": "0.45", "p_unrelated": "0.15", "visual_boost": "0.0", "seed": "0",
    },
    "eval": {"n_buckets": "5"},
}


@dataclass
class PipelineConfig:
    parser: configparser.ConfigParser
    base_dir: Path

    @classmethod
    def load(cls, path: Optional[str | Path] = None,
             overrides: Iterable[str] = ()) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        parser.read_dict(DEFAULTS)
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            parser.read(path, encoding="utf-8")
            base = path.resolve().parent
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, option = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, option, value.strip())
        cfg = cls(parser, base)
        cfg.validate()
        return cfg

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def _num(self, section: str, key: str, kind=int):
        raw = self.get(section, key)
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected {kind.__name__}, got {raw!r}") from None

    def path(self, key: str) -> Path:
        p = Path(self.get("paths", key))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def dimension(self) -> int:
        return self._num("data", "dimension")

    @property
    def tree(self) -> TreeConfig:
        try:
            branching = tuple(int(x) for x in self.get("tree", "branching").split(",") if x.strip())
        except ValueError:
            raise ConfigError("tree.branching must be comma-separated integers") from None
        return TreeConfig(
            levels=self._num("tree", "levels"),
            branching=branching,
            balance_tolerance=self._num("tree", "balance_tolerance", float),
            seed=self._num("tree", "seed"),
        )

    @property
    def level(self) -> int:
        return self._num("serendipity", "level")

    @property
    def delta(self) -> int:
        return self._num("serendipity", "delta")

    @property
    def curate_k(self) -> int:
        return self._num("serendipity", "k")

    @property
    def min_support(self) -> int:
        return self._num("serendipity", "min_support")

    @property
    def alpha(self) -> float:
        return self._num("serendipity", "alpha", float)

    @property
    def planner(self) -> PlannerConfig:
        try:
            prompt_type = PromptType(self.get("planner", "prompt_type"))
            policy = ResolutionPolicy.parse(self.get("planner", "resolution"))
            use_thumbnail = self.parser.getboolean("planner", "use_thumbnail")
        except ValueError as exc:
            raise ConfigError(f"planner: {exc}") from None
        return PlannerConfig(
            prompt_type=prompt_type,
            frames=self._num("planner", "frames"),
            use_thumbnail=use_thumbnail,
            policy=policy,
            level=self.level,
            max_retries=self._num("planner", "retries"),
        )

    @property
    def backend_spec(self) -> str:
        return self.get("planner", "backend")

    @property
    def target_coverage(self) -> float:
        return self._num("batch", "target_coverage", float)

    @property
    def workers(self) -> int:
        return self._num("batch", "workers")

    @property
    def window_days(self) -> float:
        """Coverage reference window; 0 means the whole log."""
        return self._num("batch", "window_days", float)

    @property
    def beta(self) -> float:
        return self._num("retriever", "beta", float)

    @property
    def decay(self) -> float:
        return self._num("retriever", "decay", float)

    @property
    def sim(self) -> SimConfig:
        return SimConfig(
            n_users=self._num("sim", "n_users"),
            n_steps=self._num("sim", "n_steps"),
            k=self._num("sim", "k"),
            p_similar=self._num("sim", "p_similar", float),
            p_serendip=self._num("sim", "p_serendip", float),
            p_unrelated=self._num("sim", "p_unrelated", float),
            visual_boost=self._num("sim", "visual_boost", float),
            l=self.level,
            delta=self.delta,
            seed=self._num("sim", "seed"),
        )

    def validate(self) -> None:
        """Check every parameter range before any data is touched."""
        tree = self.tree
        try:
            tree.validate()
        except ValueError as exc:
            raise ConfigError(f"tree: {exc}") from None
        if self.dimension <= 0:
            raise ConfigError("data.dimension must be positive")
        if self.delta < 1:
            raise ConfigError("serendipity.delta must be >= 1")
        if self.level - self.delta < 0:
            raise ConfigError("serendipity.level - serendipity.delta must be >= 0")
        if self.level > tree.levels - 1:
            raise ConfigError(f"serendipity.level must be <= {tree.levels - 1}")
        if self.curate_k <= 0:
            raise ConfigError("serendipity.k must be positive")
        if self.min_support < 0 or self.alpha < 0:
            raise ConfigError("serendipity.min_support and alpha must be >= 0")
        if not 0.0 <= self.target_coverage <= 1.0:
            raise ConfigError("batch.target_coverage must be in [0, 1]")
        if self.workers < 1:
            raise ConfigError("batch.workers must be >= 1")
        if self.window_days < 0:
            raise ConfigError("batch.window_days must be >= 0")
        planner = self.planner
        if planner.frames < 1 or planner.max_retries < 0:
            raise ConfigError("planner.frames must be >= 1 and planner.retries >= 0")
        kind = self.backend_spec.partition(":")[0]
        if kind not in ("oracle", "noisy", "replay", "remote"):
            raise ConfigError(f"planner.backend: unknown backend {self.backend_spec!r}")
        try:
            self.sim.validate()
        except ValueError as exc:
            raise ConfigError(f"sim: {exc}") from None
        if self.beta < 0 or self.decay < 0:
            raise ConfigError("retriever.beta and retriever.decay must be >= 0")
        if self._num("eval", "n_buckets") < 1:
            raise ConfigError("eval.n_buckets must be >= 1")
