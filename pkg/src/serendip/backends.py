"""Text-generation backends for the planner.

All backends count their calls. Stubs key their output on the prompt's
``item_id`` and ``stage``, so they are deterministic and safe to share
between threads.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
import zlib
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .planner import Prompt, PromptType


class BackendError(RuntimeError):
    """A backend could not produce text for a prompt."""


class GenerationBackend:
    deterministic = True
    concurrent_safe = True

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.call_counter = 0

    def generate(self, prompt: Prompt) -> str:
        with self._lock:
            self.call_counter += 1
        return self._generate(prompt)

    def _generate(self, prompt: Prompt) -> str:
        raise NotImplementedError


def summarize_blocks(prompt: Prompt) -> str:
    """Stand-in content summary used by the stub backends for CoT stage 1."""
    parts = [b.text for b in prompt.context_blocks]
    return "Summary: " + "; ".join(parts) if parts else "Summary: (no content)"


class OracleBackend(GenerationBackend):
    """Answers with a known label description per item.

    Items without a label use `fallback(item_id)` when given, otherwise the
    literal ``"unknown"`` (which never resolves).
    """

    def __init__(self, labels: Mapping[str, str],
                 fallback: Optional[Callable[[str], Optional[str]]] = None):
        super().__init__()
        self.labels = dict(labels)
        self.fallback = fallback

    def label_for(self, item_id: str) -> str:
        label = self.labels.get(item_id)
        if label is None and self.fallback is not None:
            label = self.fallback(item_id)
        return "unknown" if label is None else label

    def _generate(self, prompt: Prompt) -> str:
        if prompt.prompt_type is PromptType.VIDEO_COT and prompt.stage == 1:
            return summarize_blocks(prompt)
        return self.label_for(prompt.item_id)


def corrupt(text: str, rng: np.random.Generator, avoid: frozenset = frozenset()) -> str:
    """Replace one character so the result differs from `text` and `avoid`."""
    alphabet = "abcdefghijklmnopqrstuvwxyz"
    for _ in range(100):
        if not text:
            out = alphabet[rng.integers(26)]
        else:
            pos = int(rng.integers(len(text)))
            ch = alphabet[rng.integers(26)]
            out = text[:pos] + ch + text[pos + 1:]
        if out != text and out.strip() not in avoid:
            return out
    return text + "~"


class NoisyBackend(OracleBackend):
    """Oracle whose final answer is corrupted with probability `q`.

    The coin for an item depends only on ``(seed, item_id)``, so repeated
    prompts for the same item get the same answer.
    """

    def __init__(self, labels: Mapping[str, str], q: float, seed: int = 0,
                 vocabulary: Iterable[str] = (),
                 fallback: Optional[Callable[[str], Optional[str]]] = None):
        super().__init__(labels, fallback)
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must be in [0, 1]")
        self.q = q
        self.seed = seed
        self.vocabulary = frozenset(v.strip() for v in vocabulary)

    def _generate(self, prompt: Prompt) -> str:
        text = super()._generate(prompt)
        if prompt.prompt_type is PromptType.VIDEO_COT and prompt.stage == 1:
            return text
        rng = np.random.default_rng([self.seed, zlib.crc32(prompt.item_id.encode())])
        if rng.random() < self.q:
            return corrupt(text, rng, self.vocabulary)
        return text


class ReplayBackend(GenerationBackend):
    """Plays back recorded generations keyed by (item_id, prompt_type, stage)."""

    def __init__(self, records: Iterable[dict]):
        super().__init__()
        self.table = {(r["item_id"], PromptType(r["prompt_type"]), int(r["stage"])): r["text"]
                      for r in records}

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        with open(path, encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def _generate(self, prompt: Prompt) -> str:
        key = (prompt.item_id, prompt.prompt_type, prompt.stage)
        try:
            return self.table[key]
        except KeyError:
            raise BackendError(f"no recorded generation for {key}") from None


class RemoteBackend(GenerationBackend):
    """POSTs the prompt as JSON and reads ``{"text": ...}`` back."""

    deterministic = False

    def __init__(self, url: str, timeout: float = 30.0):
        super().__init__()
        self.url = url
        self.timeout = timeout

    def _generate(self, prompt: Prompt) -> str:
        body = json.dumps(prompt.to_wire()).encode("utf-8")
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise BackendError(f"{self.url}: {exc}") from exc
        text = payload.get("text") if isinstance(payload, dict) else None
        if not isinstance(text, str):
            raise BackendError(f"{self.url}: response has no text field")
        return text


class DelayedBackend(GenerationBackend):
    """Wraps another backend and sleeps `delay` seconds per call (latency model)."""

    def __init__(self, inner: GenerationBackend, delay: float):
        super().__init__()
        self.inner = inner
        self.delay = delay
        self.deterministic = inner.deterministic

    def _generate(self, prompt: Prompt) -> str:
        time.sleep(self.delay)
        return self.inner.generate(prompt)
