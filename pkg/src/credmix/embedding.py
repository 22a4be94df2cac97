"""Text-to-vector providers and a content-addressed on-disk cache.

The stub provider is a signed feature hash: each lowercase ``\\w+`` token adds
``sign(token)`` at ``index(token)``, then the vector is L2-normalized.
``index`` and ``sign`` come from two keyed BLAKE2b-64 digests of the UTF-8
token (keys :data:`INDEX_KEY` and :data:`SIGN_KEY`), read little-endian; the
index is the digest modulo ``D`` and the sign is ``+1`` when the digest's low
bit is 0.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .data import Dataset
from .errors import ConfigurationError, ContractError, ProviderError

log = logging.getLogger(__name__)

INDEX_KEY = b"credmix/index/v1"
SIGN_KEY = b"credmix/sign/v1"
_TOKEN = re.compile(r"\w+")


def _h64(data: bytes, key: bytes = b"") -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8, key=key).digest(), "little")


def content_hash(text: str) -> str:
    """64-bit BLAKE2b digest of the text, hex encoded."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    provider_tag: str
    content_hash: str


def embed_stub(text: str, dim: int) -> EmbeddingVector:
    if dim <= 0:
        raise ConfigurationError(f"embedding dimension must be positive, got {dim}")
    v = np.zeros(dim)
    for tok in tokenize(text):
        b = tok.encode("utf-8")
        v[_h64(b, INDEX_KEY) % dim] += 1.0 if _h64(b, SIGN_KEY) & 1 == 0 else -1.0
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return EmbeddingVector(v, f"stub-d{dim}", content_hash(text))


class Provider(Protocol):
    tag: str
    dim: int

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "stub"
    dim: int = 64
    endpoint: str | None = None
    model: str | None = None
    token_env: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        if self.dim <= 0:
            raise ConfigurationError(f"dim must be positive, got {self.dim}")
        if self.kind not in ("stub", "remote"):
            raise ConfigurationError(f"unknown provider kind {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint and self.model):
            raise ConfigurationError("remote provider needs endpoint and model")
        if self.kind == "stub" and (self.endpoint or self.model):
            raise ConfigurationError("endpoint/model are only valid for the remote provider")


class StubProvider:
    def __init__(self, dim: int):
        self.dim = dim
        self.tag = f"stub-d{dim}"
        self.calls = 0

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        self.calls += 1
        return [embed_stub(t, self.dim) for t in texts]


class RemoteProvider:
    """Client for ``POST {"model", "input": [...]}`` returning ``{"data": [{"index", "embedding"}]}``."""

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if config.kind != "remote":
            raise ConfigurationError("RemoteProvider needs a remote ProviderConfig")
        self.config = config
        self.dim = config.dim
        self.tag = f"remote:{config.model}:d{config.dim}"
        self._transport = transport
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        env = self.config.token_env
        if env and os.environ.get(env):
            return {"Authorization": f"Bearer {os.environ[env]}"}
        return {}

    def _post(self, texts: Sequence[str]) -> dict:
        cfg = self.config
        last: Exception | None = None
        with httpx.Client(transport=self._transport, timeout=cfg.timeout) as client:
            for attempt in range(cfg.max_retries + 1):
                if attempt:
                    self._sleep(cfg.backoff * 2 ** (attempt - 1))
                try:
                    resp = client.post(cfg.endpoint, json={"model": cfg.model, "input": list(texts)},
                                       headers=self._headers())
                    if resp.status_code >= 500 or resp.status_code == 429:
                        last = ProviderError(f"HTTP {resp.status_code} from {cfg.endpoint}")
                        continue
                    resp.raise_for_status()
                    return resp.json()
                except (httpx.TransportError, ValueError) as exc:
                    last = exc
                except httpx.HTTPStatusError as exc:
                    raise ProviderError(f"embedding request rejected: {exc}") from exc
        raise ProviderError(
            f"embedding request to {cfg.endpoint} failed after {cfg.max_retries + 1} attempts: {last}")

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            return []
        body = self._post(texts)
        try:
            items = sorted(body["data"], key=lambda d: d["index"])
            indices = [int(d["index"]) for d in items]
            vecs = [np.asarray(d["embedding"], dtype=np.float64) for d in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed embedding response: {exc}") from None
        if indices != list(range(len(texts))):
            raise ContractError(f"response indices {indices} do not cover the {len(texts)} inputs")
        out = []
        for t, v in zip(texts, vecs):
            if v.shape != (self.dim,):
                raise ContractError(f"expected embedding dimension {self.dim}, got {v.size}")
            if not np.all(np.isfinite(v)):
                raise ContractError("embedding contains non-finite values")
            out.append(EmbeddingVector(v, self.tag, content_hash(t)))
        return out


def make_provider(config: ProviderConfig) -> Provider:
    return StubProvider(config.dim) if config.kind == "stub" else RemoteProvider(config)


def embed_remote(texts: Sequence[str], config: ProviderConfig, **kwargs) -> list[EmbeddingVector]:
    return RemoteProvider(config, **kwargs).embed(texts)


class EmbeddingCache:
    """One JSON file per ``(provider_tag, content_hash)``, written by atomic rename."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(provider_tag: str, chash: str) -> str:
        return hashlib.sha256(f"{provider_tag}\0{chash}".encode()).hexdigest()

    def _read(self, path: Path, tag: str, chash: str, dim: int) -> EmbeddingVector | None:
        try:
            rec = json.loads(path.read_text(encoding="utf-8"))
            values = np.asarray(rec["values"], dtype=np.float64)
            ok = (rec["provider_tag"] == tag and rec["hash"] == chash and rec["dim"] == dim
                  and values.shape == (dim,) and np.all(np.isfinite(values)))
        except (OSError, ValueError, KeyError, TypeError):
            ok = False
        if not ok:
            log.warning("corrupt embedding cache record %s; recomputing", path.name)
            return None
        return EmbeddingVector(values, tag, chash)

    def _write(self, path: Path, vec: EmbeddingVector) -> None:
        rec = {"provider_tag": vec.provider_tag, "hash": vec.content_hash,
               "dim": int(vec.values.size), "values": vec.values.tolist()}
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(rec, fh)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def get_or_compute(self, text: str, provider: Provider) -> EmbeddingVector:
        return self.get_or_compute_many([text], provider)[0]

    def get_or_compute_many(self, texts: Sequence[str], provider: Provider) -> list[EmbeddingVector]:
        out: list[EmbeddingVector | None] = [None] * len(texts)
        todo: dict[str, list[int]] = {}
        for j, t in enumerate(texts):
            chash = content_hash(t)
            path = self.dir / f"{self.key(provider.tag, chash)}.json"
            if path.exists():
                out[j] = self._read(path, provider.tag, chash, provider.dim)
            if out[j] is None:
                todo.setdefault(t, []).append(j)
        if todo:
            fresh = provider.embed(list(todo))
            for (t, slots), vec in zip(todo.items(), fresh):
                self._write(self.dir / f"{self.key(provider.tag, vec.content_hash)}.json", vec)
                for j in slots:
                    out[j] = vec
        return out  # type: ignore[return-value]


@dataclass
class EmbeddedData:
    """Dense arrays for a dataset: ``partitions (n, N, D)``, ``global_ (n, D)``, ``labels (n, C)``."""

    ids: list[str]
    partitions: np.ndarray
    global_: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_agents(self) -> int:
        return self.partitions.shape[1]

    @property
    def dim(self) -> int:
        return self.global_.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def take(self, index) -> "EmbeddedData":
        index = np.atleast_1d(np.asarray(index))
        return EmbeddedData([self.ids[i] for i in index], self.partitions[index],
                            self.global_[index], self.labels[index])

    def select(self, ids: Sequence[str]) -> "EmbeddedData":
        pos = {c: j for j, c in enumerate(self.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise KeyError(f"unknown case ids: {missing[:5]}")
        return self.take([pos[i] for i in ids])


def embed_dataset(dataset: Dataset, provider: Provider | None = None,
                  cache: EmbeddingCache | None = None) -> EmbeddedData:
    """Vector-mode datasets pass straight through; text mode needs a provider."""
    n, N = len(dataset.cases), dataset.n_agents
    if dataset.mode == "vector":
        parts = np.array([c.partitions for c in dataset.cases], dtype=np.float64).reshape(n, N, -1)
        glob = np.array([c.global_payload for c in dataset.cases], dtype=np.float64)
        return EmbeddedData(dataset.ids, parts, glob, dataset.labels())
    if provider is None:
        raise ConfigurationError("text-mode dataset requires an embedding provider")
    texts = [p for c in dataset.cases for p in (*c.partitions, c.global_payload)]
    vecs = (cache.get_or_compute_many(texts, provider) if cache is not None
            else provider.embed(texts))
    arr = np.array([v.values for v in vecs]).reshape(n, N + 1, provider.dim)
    return EmbeddedData(dataset.ids, arr[:, :N, :].copy(), arr[:, N, :].copy(), dataset.labels())
