"""Items, interaction logs and impression statistics.

Both file formats are JSON lines. Items carry a topic vector that is
re-normalized on ingestion; interactions are (context, next) transitions
with a boolean satisfaction flag.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    """Raised when an input file cannot produce a usable catalog or log."""


@dataclass
class Item:
    item_id: str
    title: str
    topic_vector: np.ndarray
    traffic_weight: float = 1.0
    frame_captions: list[str] = field(default_factory=list)
    thumbnail_caption: Optional[str] = None
    visually_interesting_score: Optional[float] = None

    def to_dict(self) -> dict:
        row = {
            "item_id": self.item_id,
            "title": self.title,
            "topic_vector": [float(x) for x in self.topic_vector],
            "traffic_weight": float(self.traffic_weight),
            "frame_captions": list(self.frame_captions),
        }
        if self.thumbnail_caption is not None:
            row["thumbnail_caption"] = self.thumbnail_caption
        if self.visually_interesting_score is not None:
            row["visually_interesting_score"] = float(self.visually_interesting_score)
        return row


@dataclass
class IngestStats:
    accepted: int = 0
    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return self.accepted + self.rejected

    def reject(self, reason: str) -> None:
        self.rejected += 1
        self.reasons[reason] += 1


class ItemCatalog:
    """Keyed, immutable-by-convention collection of items of one dimension."""

    def __init__(self, items: dict[str, Item], dimension: int,
                 ingest_stats: Optional[IngestStats] = None):
        self.items = items
        self.dimension = dimension
        self.ingest_stats = ingest_stats or IngestStats(accepted=len(items))
        self._ids = sorted(items)

    @classmethod
    def from_items(cls, items: Iterable[Item], dimension: Optional[int] = None) -> "ItemCatalog":
        """Build a catalog in memory, applying the same rules as `load_items`."""
        items = list(items)
        if dimension is None:
            if not items:
                raise CorpusError("cannot infer dimension from an empty item list")
            dimension = len(items[0].topic_vector)
        stats = IngestStats()
        accepted: dict[str, Item] = {}
        for item in items:
            reason = _validate(item, dimension)
            if reason is None and item.item_id in accepted:
                reason = "duplicate_id"
            if reason is not None:
                stats.reject(reason)
                continue
            item.topic_vector = _normalize(item.topic_vector)
            accepted[item.item_id] = item
            stats.accepted += 1
        return cls(accepted, dimension, stats)

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self.items

    def __getitem__(self, item_id: str) -> Item:
        return self.items[item_id]

    def __iter__(self) -> Iterator[Item]:
        return (self.items[i] for i in self._ids)

    @property
    def ids(self) -> list[str]:
        """Item ids in ascending order."""
        return list(self._ids)

    def matrix(self, ids: Optional[list[str]] = None) -> np.ndarray:
        ids = self._ids if ids is None else ids
        if not ids:
            return np.zeros((0, self.dimension))
        return np.stack([self.items[i].topic_vector for i in ids])

    def weights(self, ids: Optional[list[str]] = None) -> np.ndarray:
        ids = self._ids if ids is None else ids
        return np.array([self.items[i].traffic_weight for i in ids], dtype=float)


def _normalize(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=float)
    norm = np.linalg.norm(v)
    # leave unit vectors alone so load -> save -> load is bit-stable
    return v if abs(norm - 1.0) <= 1e-12 else v / norm


def _validate(item: Item, dimension: int) -> Optional[str]:
    v = np.asarray(item.topic_vector, dtype=float)
    if v.ndim != 1 or v.shape[0] != dimension:
        return "dimension"
    if not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0.0:
        return "vector"
    if not math.isfinite(item.traffic_weight) or item.traffic_weight < 0:
        return "traffic_weight"
    s = item.visually_interesting_score
    if s is not None and not (0.0 <= s <= 1.0):
        return "visually_interesting_score"
    return None


def _item_from_row(row: dict) -> Item:
    captions = row.get("frame_captions", [])
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise TypeError("frame_captions must be a list of strings")
    item_id = row["item_id"]
    if not isinstance(item_id, str) or not item_id:
        raise TypeError("item_id must be a non-empty string")
    score = row.get("visually_interesting_score")
    return Item(
        item_id=item_id,
        title=str(row["title"]),
        topic_vector=np.asarray(row["topic_vector"], dtype=float),
        traffic_weight=float(row["traffic_weight"]),
        frame_captions=captions,
        thumbnail_caption=row.get("thumbnail_caption"),
        visually_interesting_score=None if score is None else float(score),
    )


def _read_rows(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line


def load_items(path: str | Path, dimension: int) -> ItemCatalog:
    """Load a JSON-lines item file.

    Rows with the wrong vector dimension, invalid fields or a repeated
    ``item_id`` are rejected and counted; the first occurrence of an id
    wins. Blank lines are not rows.

    Raises:
        OSError: the file cannot be read.
        CorpusError: no row was accepted.
    """
    if dimension <= 0:
        raise CorpusError(f"dimension must be positive, got {dimension}")
    stats = IngestStats()
    items: dict[str, Item] = {}
    for lineno, line in _read_rows(Path(path)):
        try:
            item = _item_from_row(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            logger.debug("items line %d malformed: %s", lineno, exc)
            stats.reject("malformed")
            continue
        reason = _validate(item, dimension)
        if reason is None and item.item_id in items:
            reason = "duplicate_id"
        if reason is not None:
            logger.debug("items line %d rejected: %s", lineno, reason)
            stats.reject(reason)
            continue
        item.topic_vector = _normalize(item.topic_vector)
        items[item.item_id] = item
        stats.accepted += 1
    if not items:
        raise CorpusError(f"{path}: no valid item rows")
    return ItemCatalog(items, dimension, stats)


def _file_mode() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


@contextmanager
def atomic_open(path: str | Path, newline: Optional[str] = None):
    """Text handle on a temp file that replaces `path` only on clean exit."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        os.chmod(tmp, _file_mode())  # mkstemp creates 0600
        with os.fdopen(fd, "w", encoding="utf-8", newline=newline) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_items(catalog: ItemCatalog, path: str | Path) -> None:
    with atomic_open(path) as fh:
        for item in catalog:
            fh.write(json.dumps(item.to_dict()) + "\n")


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    context_item_id: str
    next_item_id: str
    satisfied: bool
    timestamp: int

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "context_item_id": self.context_item_id,
            "next_item_id": self.next_item_id,
            "satisfied": self.satisfied,
            "timestamp": self.timestamp,
        }


@dataclass
class InteractionLog:
    records: list[InteractionRecord] = field(default_factory=list)
    ingest_stats: IngestStats = field(default_factory=IngestStats)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[InteractionRecord]:
        return iter(self.records)

    @property
    def dropped(self) -> int:
        return self.ingest_stats.rejected

    def sorted(self) -> "InteractionLog":
        """Copy ordered by (timestamp, user_id), stable for equal keys."""
        recs = sorted(self.records, key=lambda r: (r.timestamp, r.user_id))
        return InteractionLog(recs, self.ingest_stats)


def _record_from_row(row: dict) -> InteractionRecord:
    satisfied = row["satisfied"]
    timestamp = row["timestamp"]
    if not isinstance(satisfied, bool):
        raise TypeError("satisfied must be a boolean")
    if isinstance(timestamp, bool) or not isinstance(timestamp, int):
        raise TypeError("timestamp must be an integer")
    ids = (row["user_id"], row["context_item_id"], row["next_item_id"])
    if not all(isinstance(x, str) for x in ids):
        raise TypeError("ids must be strings")
    return InteractionRecord(*ids, satisfied=satisfied, timestamp=timestamp)


def load_interactions(path: str | Path, catalog: ItemCatalog) -> InteractionLog:
    """Load a JSON-lines interaction file, keeping file order.

    Malformed rows and rows naming items outside `catalog` are dropped and
    counted in ``ingest_stats``.
    """
    log = InteractionLog()
    stats = log.ingest_stats
    for lineno, line in _read_rows(Path(path)):
        try:
            rec = _record_from_row(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            logger.debug("interactions line %d malformed: %s", lineno, exc)
            stats.reject("malformed")
            continue
        if rec.context_item_id not in catalog or rec.next_item_id not in catalog:
            stats.reject("unknown_item")
            continue
        log.records.append(rec)
        stats.accepted += 1
    return log


def save_interactions(log: InteractionLog | Iterable[InteractionRecord], path: str | Path) -> None:
    with atomic_open(path) as fh:
        for rec in log:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def impression_counts(log: Iterable[InteractionRecord]) -> Counter:
    """Number of logged impressions per next item."""
    return Counter(r.next_item_id for r in log)


def impression_coverage(subset: Iterable[str], log: InteractionLog) -> float:
    """Fraction of logged impressions whose next item lies in `subset`."""
    if len(log) == 0:
        return 0.0
    subset = set(subset)
    hit = sum(1 for r in log if r.next_item_id in subset)
    return hit / len(log)
