"""Verbal context: prompts, LLM clients, and encoding reasoning text into memory."""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Protocol

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, LLMLookupError, LLMTransportError
from .memory import MemoryEncoder, MemoryState, SlotMemory
from .nn import Module
from .tensor import Tensor

NO_HISTORY = "(no prior utterances)"
DEFAULT_WINDOW = 6
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@dataclass
class PromptContext:
    relationship: str
    activity: str
    history: list[tuple[str, str]]
    target_label: str
    entities: list[str]
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"history window must be positive, got {self.window}")
        if len(self.history) > self.window:
            raise ConfigError(f"history has {len(self.history)} utterances, window is {self.window}")
        if not self.entities:
            raise ConfigError("prompt context needs at least one entity")
        self.history = [tuple(h) for h in self.history]

    @classmethod
    def windowed(cls, relationship, activity, history, target_label, entities, window=DEFAULT_WINDOW):
        """Keep only the last ``window`` utterances of ``history``."""
        return cls(relationship, activity, list(history)[-window:] if history else [], target_label,
                   list(entities), window)

    def to_dict(self) -> dict:
        return {
            "relationship": self.relationship, "activity": self.activity,
            "history": [list(h) for h in self.history], "target_label": self.target_label,
            "entities": list(self.entities), "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptContext":
        return cls(d["relationship"], d["activity"], [tuple(h) for h in d.get("history", [])],
                   d["target_label"], list(d["entities"]), int(d.get("window", DEFAULT_WINDOW)))


@dataclass
class ReasoningSet:
    sentences: dict[str, list[str]] = field(default_factory=dict)

    def text(self, entities: list[str] | None = None) -> str:
        """All sentences joined in entity order."""
        order = entities if entities is not None else list(self.sentences)
        return " ".join(" ".join(self.sentences.get(e, [])) for e in order).strip()


@dataclass
class VerbalMemory:
    mem: Tensor
    empty: bool = False


def build_prompt(ctx: PromptContext, entity: str) -> str:
    if entity not in ctx.entities:
        raise ConfigError(f"entity {entity!r} not among {ctx.entities}")
    if ctx.history:
        lines = "\n".join(f"- {speaker}: {utt}" for speaker, utt in ctx.history)
    else:
        lines = NO_HISTORY
    return (
        f"Relationship: {ctx.relationship}\n"
        f"Activity: {ctx.activity}\n"
        f"Conversation history (window {ctx.window}):\n{lines}\n"
        f"Label to predict: {ctx.target_label}\n"
        f"Entities: {', '.join(ctx.entities)}\n"
        f"Describe the verbal cues relevant to {ctx.target_label} from the perspective of: {entity}."
    )


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def prompt_hash(prompt: str) -> str:
    return f"{fnv1a_64(prompt.encode('utf-8')):016x}"


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class MockLLMClient:
    """Canned responses looked up by the FNV-1a hash of the prompt."""

    def __init__(self, fixture: dict[str, str] | str | os.PathLike):
        if isinstance(fixture, (str, os.PathLike)):
            try:
                fixture = json.loads(Path(fixture).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise DataError(f"LLM fixture file not found: {fixture}") from exc
        self.table = {str(k).lower(): str(v) for k, v in fixture.items()}

    def complete(self, prompt: str) -> str:
        key = prompt_hash(prompt)
        try:
            return self.table[key]
        except KeyError:
            raise LLMLookupError(f"no canned response for prompt hash {key}") from None


class HTTPLLMClient:
    """Chat-completions style endpoint: POST {model, messages}, read choices[0].message.content."""

    def __init__(self, endpoint: str, token: str | None = None, model: str = "gpt-3.5-turbo",
                 retries: int = 2, timeout: float = 30.0, backoff: float = 0.5):
        self.endpoint, self.token, self.model = endpoint, token, model
        self.retries, self.timeout, self.backoff = retries, timeout, backoff

    def complete(self, prompt: str) -> str:
        body = json.dumps({"model": self.model, "messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return str(payload["choices"][0]["message"]["content"])
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                last = f"transport failure: {exc}"
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last = f"malformed response: {exc!r}"
        raise LLMTransportError(f"LLM request to {self.endpoint} failed: {last}", retries=self.retries)


def client_from_env(fixture: str | os.PathLike | None = None, model: str = "gpt-3.5-turbo") -> LLMClient:
    endpoint = os.environ.get("CPMT_LLM_ENDPOINT")
    if endpoint:
        return HTTPLLMClient(endpoint, os.environ.get("CPMT_LLM_TOKEN"), model)
    if fixture is None:
        raise ConfigError("CPMT_LLM_ENDPOINT is unset; a mock fixture file is required")
    return MockLLMClient(fixture)


def query_llm(client: LLMClient, prompt: str) -> str:
    return client.complete(prompt)


def collect_reasoning(ctx: PromptContext, client: LLMClient) -> ReasoningSet:
    """One response per entity, in entity order."""
    return ReasoningSet({e: [query_llm(client, build_prompt(ctx, e))] for e in ctx.entities})


# -- stub server ------------------------------------------------------------------

def serve_stub(text: str, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Local chat-completions stub answering every POST with ``text``.

    Returns the running server; ``server.server_address`` gives the port and
    ``server.shutdown()`` stops it.  Each request body is kept in
    ``server.requests``.
    """

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):  # noqa: N802
            n = int(self.headers.get("Content-Length", 0))
            self.server.requests.append(json.loads(self.rfile.read(n) or b"{}"))
            out = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    server.requests = []
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


# -- encoding ---------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return text.lower().split()


class HashEmbedding(Module):
    """Vocabulary-free embedding: token → FNV-1a(salt + token) mod buckets → table row."""

    def __init__(self, buckets: int, d: int, rng: np.random.Generator, dtype=np.float64, salt: str = "cpmt"):
        self.buckets = buckets
        self.salt = salt
        self.table = Tensor(rng.normal(0.0, 1.0, size=(buckets, d)).astype(dtype), requires_grad=True)

    def ids(self, tokens: list[str]) -> np.ndarray:
        return np.array([fnv1a_64((self.salt + t).encode("utf-8")) % self.buckets for t in tokens], dtype=np.int64)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class VerbalEncoder(Module):
    """Embeds reasoning text and writes it into memory with one single-segment pass."""

    def __init__(self, d: int, num_heads: int, layers: int, buckets: int, max_tokens: int,
                 rng: np.random.Generator, dtype=np.float64, ff_mult: int = 2):
        self.embed = HashEmbedding(buckets, d, rng, dtype)
        self.encoder = MemoryEncoder(d, num_heads, layers, rng, dtype, ff_mult)
        self.max_tokens = max_tokens

    def token_ids(self, text: str) -> np.ndarray:
        return self.embed.ids(tokenize(text)[: self.max_tokens])

    def encode_ids(self, ids_list: list[np.ndarray], memory: SlotMemory, rng=None) -> VerbalMemory:
        """Batched encoding; fragments without tokens keep the terminal state exactly."""
        b = len(ids_list)
        n = max([len(i) for i in ids_list] + [1])
        ids = np.zeros((b, n), dtype=np.int64)
        mask = np.zeros((b, n), dtype=bool)
        for r, row in enumerate(ids_list):
            ids[r, : len(row)] = row
            mask[r, : len(row)] = True
        mem0 = memory.initial_state(b)
        has = mask.any(axis=1)
        if not has.any():
            return VerbalMemory(mem0.slots, empty=True)
        mask[~has, 0] = True  # placeholder token, result discarded below
        x = self.embed(ids)
        _, state = self.encoder.run_segments([x], mem0, True, [mask], rng)
        if has.all():
            return VerbalMemory(state.slots)
        keep = has.astype(x.dtype)[:, None, None]
        slots = state.slots * Tensor(keep) + mem0.slots * Tensor(1.0 - keep)
        return VerbalMemory(slots)


def encode_verbal_memory(s: ReasoningSet, verbal: VerbalEncoder, memory: SlotMemory,
                         entities: list[str] | None = None) -> VerbalMemory:
    """Single-fragment encoding into ``[k, d]`` slots.

    Empty text yields the terminal state ``v̂_bias`` with ``empty=True``,
    which is exactly the no-LLM starting memory.
    """
    ids = verbal.token_ids(s.text(entities))
    if ids.size == 0:
        return VerbalMemory(memory.initial_state().slots, empty=True)
    vm = verbal.encode_ids([ids], memory)
    return VerbalMemory(T.reshape(vm.mem, vm.mem.shape[1:]), empty=vm.empty)


def memory_from_verbal(vm: VerbalMemory, mem0: MemoryState) -> MemoryState:
    return MemoryState(vm.mem, mem0.v_bias, mem0.tau, 0)
