"""Chat-completion client: OpenAI-compatible HTTP transport, offline backends, transcripts.

A :class:`ChatClient` wraps one backend with the retry policy, a concurrency
cap and an optional transcript. Backends implement ``send(messages, config)``
and return a :class:`ChatExchange`; transient failures raise
:class:`TransientError`, which the client retries with exponential backoff.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import threading
import time
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .agents import greedy_choice, greedy_reasoning
from .errors import AuthError, BackendError, ConfigError
from .prompting import read_prompt_state

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "gpt-4"
    temperature: float = 0.0
    top_p: float = 1.0
    timeout: float = 60.0
    max_retries: int = 3
    api_key_env_var: str | None = "OPENAI_API_KEY"
    backoff: float = 0.5
    max_concurrency: int = 20
    logprobs: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ChatExchange:
    messages: tuple[dict, ...]
    response: str
    latency: float = 0.0
    usage: dict | None = None
    logprobs: tuple[float, ...] | None = None

    @property
    def prompt(self) -> str:
        return self.messages[-1]["content"]


class TransientError(BackendError):
    """Retryable failure: transport error, timeout or 5xx."""


class Backend(Protocol):
    name: str

    def send(self, messages: Sequence[dict], config: BackendConfig) -> ChatExchange: ...


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def user_messages(prompt) -> tuple[dict, ...]:
    return ({"role": "user", "content": str(prompt)},)


def request_body(messages: Sequence[dict], config: BackendConfig) -> dict:
    body = {
        "model": config.model,
        "messages": list(messages),
        "temperature": config.temperature,
        "top_p": config.top_p,
    }
    if config.logprobs:
        body["logprobs"] = True
    return body


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------


class HttpBackend:
    """POSTs to ``{endpoint}/chat/completions``."""

    name = "http"

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        headers = {}
        if config.api_key_env_var:
            key = os.environ.get(config.api_key_env_var)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._url = config.endpoint.rstrip("/") + "/chat/completions"

    def close(self) -> None:
        self._http.close()

    def send(self, messages: Sequence[dict], config: BackendConfig) -> ChatExchange:
        t0 = time.monotonic()
        try:
            resp = self._http.post(self._url, json=request_body(messages, config))
        except httpx.TransportError as exc:  # includes timeouts
            raise TransientError(f"transport error: {exc}") from exc
        latency = time.monotonic() - t0
        if resp.status_code in (401, 403):
            raise AuthError(f"backend rejected credentials ({resp.status_code})")
        if resp.status_code >= 500:
            raise TransientError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"request failed ({resp.status_code}): {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        logprobs = None
        content = (choice.get("logprobs") or {}).get("content")
        if content:
            logprobs = tuple(float(tok["logprob"]) for tok in content)
        return ChatExchange(tuple(messages), text, latency, data.get("usage"), logprobs)


class StubBackend:
    """Canned responses keyed by prompt hash, or cycled round-robin."""

    name = "stub"

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        cycle: Sequence[str] | None = None,
        default: str | None = None,
    ):
        if not responses and not cycle and default is None:
            raise ConfigError("stub backend needs responses, a cycle list or a default")
        self.responses = dict(responses or {})
        self._cycle = itertools.cycle(cycle) if cycle else None
        self._lock = threading.Lock()
        self.default = default

    def send(self, messages: Sequence[dict], config: BackendConfig) -> ChatExchange:
        key = prompt_hash(messages[-1]["content"])
        if key in self.responses:
            text = self.responses[key]
        elif self._cycle is not None:
            with self._lock:
                text = next(self._cycle)
        elif self.default is not None:
            text = self.default
        else:
            raise BackendError(f"stub has no response for prompt {key[:12]}")
        return ChatExchange(tuple(messages), text)


class GreedyPromptBackend:
    """Reads the queue counts back out of the prompt and answers like the greedy stub."""

    name = "greedy"

    def send(self, messages: Sequence[dict], config: BackendConfig) -> ChatExchange:
        state = read_prompt_state(messages[-1]["content"])
        try:
            totals = {pid: s["queued"][2] for pid, s in state.items()}
        except TypeError as exc:
            raise BackendError("prompt has no readable queue counts") from exc
        if not totals:
            raise BackendError("prompt has no signal blocks")
        return ChatExchange(tuple(messages), greedy_reasoning(totals, greedy_choice(totals)))


class ReplayBackend:
    """Serves responses from a transcript, in recorded order per prompt."""

    name = "replay"

    def __init__(self, exchanges: Iterable[ChatExchange]):
        self._queues: dict[str, deque[ChatExchange]] = defaultdict(deque)
        for ex in exchanges:
            self._queues[prompt_hash(ex.prompt)].append(ex)
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        return cls(read_transcript(path))

    def send(self, messages: Sequence[dict], config: BackendConfig) -> ChatExchange:
        key = prompt_hash(messages[-1]["content"])
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise BackendError(f"transcript has no (remaining) exchange for prompt {key[:12]}")
            ex = queue.popleft()
        return replace(ex, messages=tuple(messages), latency=0.0)


# --------------------------------------------------------------------------
# transcripts
# --------------------------------------------------------------------------


def exchange_to_dict(ex: ChatExchange, backend: str = "") -> dict:
    return {
        "backend": backend,
        "messages": list(ex.messages),
        "response": ex.response,
        "latency": ex.latency,
        "usage": ex.usage,
        "logprobs": list(ex.logprobs) if ex.logprobs is not None else None,
    }


def exchange_from_dict(d: Mapping) -> ChatExchange:
    lp = d.get("logprobs")
    return ChatExchange(
        tuple(d["messages"]), d["response"], float(d.get("latency", 0.0)), d.get("usage"),
        tuple(lp) if lp is not None else None,
    )


def read_transcript(path: str | Path) -> list[ChatExchange]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(exchange_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"{path}:{n}: bad transcript record: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# client
# --------------------------------------------------------------------------


@dataclass
class ChatClient:
    config: BackendConfig
    backend: Backend
    transcript_path: str | Path | None = None
    sleep: Callable[[float], None] = time.sleep
    exchanges: list[ChatExchange] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._slots = threading.BoundedSemaphore(self.config.max_concurrency)
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return getattr(self.backend, "name", type(self.backend).__name__)

    def exchange(self, prompt) -> ChatExchange:
        """One completion with retries; records the exchange."""
        messages = user_messages(prompt)
        attempt = 0
        while True:
            try:
                with self._slots:
                    ex = self.backend.send(messages, self.config)
                break
            except TransientError as exc:
                if attempt >= self.config.max_retries:
                    raise BackendError(
                        f"giving up after {attempt + 1} attempt(s): {exc}"
                    ) from exc
                delay = self.config.backoff * 2**attempt
                log.warning("backend attempt %d failed (%s); retrying in %.2fs", attempt + 1, exc, delay)
                self.sleep(delay)
                attempt += 1
        self._record(ex)
        return ex

    def complete(self, prompt) -> str:
        return self.exchange(prompt).response

    def sample_exchanges(self, prompt, k: int = 4) -> list[ChatExchange]:
        if k < 1:
            raise ValueError("k must be >= 1")
        out, errors = [], []
        for _ in range(k):
            try:
                out.append(self.exchange(prompt))
            except AuthError:
                raise
            except BackendError as exc:
                errors.append(exc)
        if not out:
            raise BackendError(f"all {k} samples failed: {errors[-1]}")
        if errors:
            warnings.warn(f"{len(errors)} of {k} samples failed; returning {len(out)}", stacklevel=2)
        return out

    def sample_k(self, prompt, k: int = 4) -> list[str]:
        return [ex.response for ex in self.sample_exchanges(prompt, k)]

    def _record(self, ex: ChatExchange) -> None:
        with self._lock:
            self.exchanges.append(ex)
            if self.transcript_path is not None:
                with open(self.transcript_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange_to_dict(ex, self.name), sort_keys=True) + "\n")


def complete(config: BackendConfig, prompt, backend: Backend | None = None) -> str:
    return ChatClient(config, backend or HttpBackend(config)).complete(prompt)


def sample_k(config: BackendConfig, prompt, k: int = 4, backend: Backend | None = None) -> list[str]:
    return ChatClient(config, backend or HttpBackend(config)).sample_k(prompt, k)


def make_backend(spec: Mapping, config: BackendConfig) -> Backend:
    """Backend from a JSON-style spec: ``{"kind": "http" | "stub" | "greedy" | "replay", ...}``."""
    kind = spec.get("kind", "http")
    if kind == "http":
        return HttpBackend(config)
    if kind == "stub":
        return StubBackend(spec.get("responses"), spec.get("cycle"), spec.get("default"))
    if kind == "greedy":
        return GreedyPromptBackend()
    if kind == "replay":
        if "transcript" not in spec:
            raise ConfigError("replay backend needs a 'transcript' path")
        return ReplayBackend.from_file(spec["transcript"])
    raise ConfigError(f"unknown backend kind {kind!r}")

