"""Embedding and chat-completion service clients with disk caching, retries and offline stubs."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import httpx
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt, wait_exponential

from .corpus import MedicalQuestion, read_json_file, tokenize
from .errors import (
    ConfigError,
    EmptyText,
    ExpansionFailed,
    InconsistentDim,
    ServiceError,
    ServiceUnavailable,
    StubMiss,
)

logger = logging.getLogger(__name__)

FNV_OFFSET_64 = 14695981039346656037
FNV_PRIME_64 = 1099511628211
FNV_MASK_64 = (1 << 64) - 1

STUB_MODEL_PATTERN = re.compile(r"^stub-(\d+)$")

EXPANSION_SYSTEM_PROMPT = (
    "You act as a medical or a health helper. Given a list of medical or health-related "
    "how-to questions, output the instructions step by step."
)

BACKENDS = ('http', 'stub')


class TransientServiceError(ServiceError):
    """A failure worth retrying: transport error, HTTP 429 or 5xx."""


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-dimension embedding of one text or frame."""

    model_id: str
    dim: int
    values: tuple[float, ...]

    def __post_init__(self):
        if self.dim <= 0:
            raise InconsistentDim(f"Embedding dim must be positive, got {self.dim}")
        if len(self.values) != self.dim:
            raise InconsistentDim(f"Embedding has {len(self.values)} values, declared dim {self.dim}")
        if not all(math.isfinite(v) for v in self.values):
            raise InconsistentDim("Embedding contains non-finite values")

    @classmethod
    def from_values(cls, model_id: str, values: Sequence[float]) -> EmbeddingVector:
        floats = tuple(float(v) for v in values)
        return cls(model_id, len(floats), floats)


@dataclass(frozen=True)
class ExpandedAnswer:
    """Generated answer text used as an expanded query.

    ``fallback`` is True when expansion failed; ``text`` is then empty.
    """

    query_id: str
    text: str
    source_model: str
    fallback: bool = False


@dataclass
class ServiceConfig:
    """Connection, retry and cache settings for one external service."""

    endpoint: str = ""
    api_key_env: str = ""
    timeout_s: float = 60.0
    max_retries: int = 3
    max_parallel: int = 4
    cache_dir: Path | None = None
    backend: str = 'http'
    model: str = ""
    stub_dim: int = 256
    backoff_s: float = 1.0
    batch_size: int = 32
    fixtures_dir: Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_parallel < 1:
            raise ConfigError(f"max_parallel must be >= 1, got {self.max_parallel}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.stub_dim < 1:
            raise ConfigError(f"stub_dim must be >= 1, got {self.stub_dim}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"Unknown service backend '{self.backend}' (expected one of {BACKENDS})")


# -----------------------------------------------------------------------
# Deterministic stub embedding
# -----------------------------------------------------------------------


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_64
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME_64) & FNV_MASK_64
    return h


def stub_embed(text: str, dim: int) -> EmbeddingVector:
    """Hash tokens into dim buckets with FNV-1a-64 and L2-normalize the counts.

    Bit-exact across platforms: only integer hashing, integer counts, and one
    correctly rounded square root are involved.

    Raises:
        EmptyText: If the text has no tokens
    """
    if dim < 1:
        raise ConfigError(f"Stub embedding dim must be >= 1, got {dim}")
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText("Cannot embed text with no tokens")

    counts = [0] * dim
    for token in tokens:
        counts[fnv1a_64(token.encode('utf-8')) % dim] += 1
    norm = math.sqrt(sum(c * c for c in counts))
    return EmbeddingVector(f"stub-{dim}", dim, tuple(c / norm for c in counts))


def stub_dim_for(model_id: str, default: int) -> int:
    match = STUB_MODEL_PATTERN.match(model_id)
    return int(match.group(1)) if match else default


# -----------------------------------------------------------------------
# Content-addressed disk cache
# -----------------------------------------------------------------------


def sha256_hex(*parts: str) -> str:
    """SHA-256 over the UTF-8 parts joined by NUL bytes."""
    return hashlib.sha256(b"\x00".join(p.encode('utf-8') for p in parts)).hexdigest()


def prompt_hash(system: str, user: str) -> str:
    return sha256_hex(system, user)


class DiskCache:
    """JSON entries under <root>/<namespace>/<hh>/<sha>.json, published atomically."""

    def __init__(self, root: Path | None, namespace: str):
        self.root = Path(root) / namespace if root else None

    def _path(self, key: str) -> Path:
        assert self.root is not None
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Any | None:
        if self.root is None:
            return None
        path = self._path(key)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, OSError) as e:
            logger.warning("Ignoring unreadable cache entry %s: %s", path, e)
            return None

    def put(self, key: str, payload: Any) -> None:
        if self.root is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{key[:8]}-", suffix=".tmp")
        try:
            with os.fdopen(fd, 'w', encoding='utf-8') as f:
                json.dump(payload, f, ensure_ascii=False)
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except FileNotFoundError:
                pass
            raise


# -----------------------------------------------------------------------
# Backends
# -----------------------------------------------------------------------


class EmbeddingBackend(Protocol):
    def embed(self, texts: Sequence[str], model_id: str) -> list[EmbeddingVector]: ...


class ChatBackend(Protocol):
    def complete(self, system: str, user: str) -> str: ...


def _auth_headers(config: ServiceConfig) -> dict[str, str]:
    if not config.api_key_env:
        return {}
    key = os.environ.get(config.api_key_env)
    if not key:
        raise ConfigError(f"Environment variable {config.api_key_env} (API key) is not set")
    return {"Authorization": f"Bearer {key}"}


def _post_json(client: httpx.Client, url: str, payload: dict[str, Any]) -> Any:
    if not url:
        raise ConfigError("Service endpoint is not configured")
    try:
        resp = client.post(url, json=payload)
    except httpx.TransportError as e:
        raise TransientServiceError(f"{url}: {e}") from e
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransientServiceError(f"{url}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise ServiceUnavailable(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError as e:
        raise ServiceUnavailable(f"{url}: response is not JSON") from e


class HttpEmbeddingBackend:
    """POST {"model", "input": [...]} → {"data": [{"embedding": [...]}, ...]}."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout_s, headers=_auth_headers(config))

    def embed(self, texts: Sequence[str], model_id: str) -> list[EmbeddingVector]:
        data = _post_json(self._client, self.config.endpoint, {"model": model_id, "input": list(texts)})
        try:
            vectors = [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as e:
            raise ServiceUnavailable(f"Malformed embedding response: missing {e}") from e
        if len(vectors) != len(texts):
            raise ServiceUnavailable(f"Embedding service returned {len(vectors)} vectors for {len(texts)} texts")
        return [EmbeddingVector.from_values(model_id, v) for v in vectors]


class HttpChatBackend:
    """POST {"model", "messages"} → {"choices": [{"message": {"content"}}]}."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout_s, headers=_auth_headers(config))

    def complete(self, system: str, user: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0,
            "seed": self.config.seed,
        }
        data = _post_json(self._client, self.config.endpoint, payload)
        try:
            return str(data["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as e:
            raise ServiceUnavailable(f"Malformed chat response: missing {e}") from e


class StubEmbeddingBackend:
    """Offline embeddings via stub_embed; 'stub-<dim>' model ids pick the dimension."""

    def __init__(self, config: ServiceConfig):
        self.default_dim = config.stub_dim

    def embed(self, texts: Sequence[str], model_id: str) -> list[EmbeddingVector]:
        dim = stub_dim_for(model_id, self.default_dim)
        return [stub_embed(t, dim) for t in texts]


def load_stub_fixtures(fixtures_dir: Path | None) -> dict[str, str]:
    """Index recorded {"system", "user", "response"} files by prompt hash."""
    index: dict[str, str] = {}
    if fixtures_dir is None:
        return index
    fixtures_dir = Path(fixtures_dir)
    if not fixtures_dir.is_dir():
        raise ConfigError(f"Stub fixtures directory not found: {fixtures_dir}")
    for path in sorted(fixtures_dir.glob('*.json')):
        record = read_json_file(path, "stub fixture")
        try:
            key = prompt_hash(record['system'], record['user'])
            index[key] = record['response']
        except (KeyError, TypeError):
            logger.warning("Skipping stub fixture without system/user/response: %s", path)
    logger.debug("Loaded %d stub chat fixtures from %s", len(index), fixtures_dir)
    return index


class StubChatBackend:
    """Replays recorded chat responses; never fabricates one."""

    def __init__(self, config: ServiceConfig):
        self.responses = load_stub_fixtures(config.fixtures_dir)

    def complete(self, system: str, user: str) -> str:
        key = prompt_hash(system, user)
        if key not in self.responses:
            raise StubMiss(key)
        return self.responses[key]


# -----------------------------------------------------------------------
# Clients
# -----------------------------------------------------------------------


@dataclass
class CallCounter:
    """Thread-safe count of backend requests."""

    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def increment(self) -> None:
        with self._lock:
            self.calls += 1


class _ServiceClient:
    def __init__(self, config: ServiceConfig, namespace: str):
        self.config = config
        self.cache = DiskCache(config.cache_dir, namespace)
        self.counter = CallCounter()
        self._slots = threading.BoundedSemaphore(config.max_parallel)

    def backend_identity(self, model_id: str) -> str:
        """Names what produced a cached value beyond the model id: the stub geometry or the HTTP endpoint."""
        if self.config.backend == 'stub':
            return f"stub:{stub_dim_for(model_id, self.config.stub_dim)}"
        return f"http:{self.config.endpoint}"

    def cache_key(self, model_id: str, *parts: str) -> str:
        return sha256_hex(self.backend_identity(model_id), model_id, *parts)

    def _call(self, fn, *args):
        """Run one backend request under the parallelism bound, retrying transient failures."""
        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=self.config.backoff_s, max=30),
            retry=retry_if_exception_type(TransientServiceError),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )

        def attempt():
            with self._slots:
                self.counter.increment()
                return fn(*args)

        try:
            return retrying(attempt)
        except TransientServiceError as e:
            raise ServiceUnavailable(f"{e} (gave up after {self.config.max_retries + 1} attempts)") from e


class EmbeddingClient(_ServiceClient):
    """Cached, retried, order-preserving text embedding."""

    def __init__(self, config: ServiceConfig, backend: EmbeddingBackend | None = None):
        super().__init__(config, 'embeddings')
        if backend is None:
            backend = StubEmbeddingBackend(config) if config.backend == 'stub' else HttpEmbeddingBackend(config)
        self.backend = backend

    def _embed_batch(self, texts: list[str], model_id: str) -> list[EmbeddingVector]:
        return self._call(self.backend.embed, texts, model_id)

    def _embed_one(self, text: str, model_id: str) -> EmbeddingVector | None:
        try:
            return self._embed_batch([text], model_id)[0]
        except ServiceError as e:
            logger.error("Embedding failed after all retries: %s", e)
            return None

    def embed_texts(self, texts: Sequence[str], model_id: str) -> list[EmbeddingVector]:
        """Embed texts, serving cache hits locally and batching the misses.

        A batch that fails after its retries falls back to per-text requests.

        Args:
            texts: Non-empty list of texts
            model_id: Encoder identity

        Returns:
            One vector per text, in input order

        Raises:
            ServiceUnavailable: Carrying the indices that failed after all retries
            InconsistentDim: If vectors in the result differ in dimension
        """
        if not texts:
            raise EmptyText("embed_texts needs at least one text")

        keys = [self.cache_key(model_id, t) for t in texts]
        results: list[EmbeddingVector | None] = [None] * len(texts)
        missing = []
        for i, key in enumerate(keys):
            cached = self.cache.get(key)
            if cached is not None:
                results[i] = EmbeddingVector.from_values(cached['model_id'], cached['values'])
            else:
                missing.append(i)

        if missing:
            logger.debug("Embedding %d of %d texts with %s (%d cached)",
                         len(missing), len(texts), model_id, len(texts) - len(missing))
            size = self.config.batch_size
            batches = [missing[s:s + size] for s in range(0, len(missing), size)]
            failed = []
            with ThreadPoolExecutor(max_workers=self.config.max_parallel) as pool:
                outcomes = list(pool.map(lambda b: self._try_batch(b, texts, model_id), batches))
                for batch, vectors in zip(batches, outcomes):
                    if vectors is None:
                        logger.warning("Batch of %d failed after all retries, falling back to per-text requests",
                                       len(batch))
                        vectors = list(pool.map(lambda i: self._embed_one(texts[i], model_id), batch))
                    for i, vector in zip(batch, vectors):
                        if vector is None:
                            failed.append(i)
                            continue
                        results[i] = vector
                        self.cache.put(keys[i], {'model_id': vector.model_id, 'values': list(vector.values)})
            if failed:
                raise ServiceUnavailable("Embedding service failed", failed)

        dims = {v.dim for v in results if v is not None}
        if len(dims) > 1:
            raise InconsistentDim(f"Embeddings for {model_id} have mixed dimensions {sorted(dims)}")
        return [v for v in results if v is not None]

    def _try_batch(self, batch: list[int], texts: Sequence[str], model_id: str) -> list[EmbeddingVector] | None:
        try:
            return self._embed_batch([texts[i] for i in batch], model_id)
        except ServiceError:
            return None


class ChatClient(_ServiceClient):
    """Cached, retried chat completion."""

    def __init__(self, config: ServiceConfig, backend: ChatBackend | None = None):
        super().__init__(config, 'chat')
        if backend is None:
            backend = StubChatBackend(config) if config.backend == 'stub' else HttpChatBackend(config)
        self.backend = backend

    def backend_identity(self, model_id: str) -> str:
        return 'stub' if self.config.backend == 'stub' else super().backend_identity(model_id)

    def complete_chat(self, system: str, user: str) -> str:
        """Return the completion for a (system, user) prompt.

        Raises:
            ServiceUnavailable: After retries are exhausted
            StubMiss: In stub mode, when no recording matches the prompt
        """
        key = self.cache_key(self.config.model, system, user)
        cached = self.cache.get(key)
        if cached is not None:
            return cached['response']
        response = self._call(self.backend.complete, system, user)
        self.cache.put(key, {'prompt_hash': prompt_hash(system, user), 'response': response})
        return response


def _as_embedding_client(client: EmbeddingClient | ServiceConfig) -> EmbeddingClient:
    return client if isinstance(client, EmbeddingClient) else EmbeddingClient(client)


def _as_chat_client(client: ChatClient | ServiceConfig) -> ChatClient:
    return client if isinstance(client, ChatClient) else ChatClient(client)


def embed_texts(texts: Sequence[str], model_id: str, cfg: EmbeddingClient | ServiceConfig) -> list[EmbeddingVector]:
    return _as_embedding_client(cfg).embed_texts(texts, model_id)


def complete_chat(system: str, user: str, cfg: ChatClient | ServiceConfig) -> str:
    return _as_chat_client(cfg).complete_chat(system, user)


def expand_question(q: MedicalQuestion, cfg: ChatClient | ServiceConfig) -> ExpandedAnswer:
    """Ask the chat service to answer a question step by step (query expansion).

    Raises:
        ExpansionFailed: If the service fails or (stub mode) has no recording
    """
    client = _as_chat_client(cfg)
    try:
        text = client.complete_chat(EXPANSION_SYSTEM_PROMPT, q.text)
    except ServiceError as e:
        raise ExpansionFailed(f"Expansion failed for {q.query_id}: {e}") from e
    return ExpandedAnswer(q.query_id, text, client.config.model or client.config.backend)


def expand_questions(questions: Sequence[MedicalQuestion], cfg: ChatClient | ServiceConfig,
                     workers: int = 1) -> list[ExpandedAnswer]:
    """Expand every question, recording failures as fallback answers instead of raising."""
    client = _as_chat_client(cfg)

    def one(q: MedicalQuestion) -> ExpandedAnswer:
        try:
            answer = expand_question(q, client)
        except ExpansionFailed as e:
            logger.warning("%s; falling back to the original question", e)
            return ExpandedAnswer(q.query_id, "", client.config.model or client.config.backend, fallback=True)
        if not answer.text.strip():
            logger.warning("Empty expansion for %s; falling back to the original question", q.query_id)
            return ExpandedAnswer(q.query_id, "", answer.source_model, fallback=True)
        return answer

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, questions))
