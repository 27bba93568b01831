"""Task-descriptor vectors: one-hot, learned-index, hashed text, or file-loaded.

The hashed provider is the in-process stand-in for an external sentence
encoder: lowercase, split on non-alphanumerics, feature-hash every token to
a signed bucket, accumulate, L2-normalize. The learned provider only mints
an index; the trainable rows live in the hypernet, which is where gradients
must flow.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DuplicateKeyError, FormatError, ShapeError
from .tensor import Tensor

_TOKEN_RE = re.compile(r"[0-9a-z]+")


@dataclass
class TaskEmbedding:
    vector: Tensor | None  # None for the learned-index provider
    provider: str  # one_hot | hashed | table | learned
    source: str | int
    index: int | None = None

    def dim(self) -> int:
        if self.vector is None:
            raise ConfigError("learned-index embeddings carry no vector")
        return self.vector.shape[-1]


def embed_one_hot(index: int, n_tasks: int) -> TaskEmbedding:
    if not 0 <= index < n_tasks:
        raise IndexError(f"one-hot index {index} out of range for {n_tasks} tasks")
    v = np.zeros(n_tasks)
    v[index] = 1.0
    return TaskEmbedding(Tensor(v), "one_hot", index)


def embed_learned_index(index: int, n_tasks: int) -> TaskEmbedding:
    if not 0 <= index < n_tasks:
        raise IndexError(f"learned index {index} out of range for {n_tasks} tasks")
    return TaskEmbedding(None, "learned", index, index=index)


def _bucket(token: str, hash_seed: int, d_task: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=str(hash_seed).encode()[:64]
    ).digest()
    value = int.from_bytes(digest, "little")
    return (value >> 1) % d_task, 1.0 if value & 1 else -1.0


def embed_hashed(description: str, d_task: int = 64, hash_seed: int = 0) -> TaskEmbedding:
    tokens = _TOKEN_RE.findall(description.lower())
    if not tokens:
        raise ConfigError("cannot embed an empty description")
    v = np.zeros(d_task)
    for tok in tokens:
        idx, sign = _bucket(tok, hash_seed, d_task)
        v[idx] += sign
    norm = np.linalg.norm(v)
    if norm == 0.0:  # all-cancelling hash collisions; keep the contract total
        v[_bucket(tokens[0], hash_seed + 1, d_task)[0]] = 1.0
        norm = 1.0
    return TaskEmbedding(Tensor(v / norm), "hashed", description)


class HashedEmbedder:
    """Callable provider with a fixed dimension and hash seed."""

    def __init__(self, d_task: int = 64, hash_seed: int = 0):
        self.d_task = d_task
        self.hash_seed = hash_seed

    def __call__(self, description: str) -> TaskEmbedding:
        return embed_hashed(description, self.d_task, self.hash_seed)


@dataclass
class EmbeddingTable:
    vectors: dict  # description text -> np.ndarray
    d_task: int

    def lookup(self, description: str) -> TaskEmbedding | None:
        v = self.vectors.get(description)
        if v is None:
            return None
        return TaskEmbedding(Tensor(v), "table", description)

    def __len__(self):
        return len(self.vectors)


def load_embedding_table(path) -> EmbeddingTable:
    """UTF-8 lines of "description<TAB>v1,v2,..."; all rows share one dim."""
    vectors: dict[str, np.ndarray] = {}
    d_task = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            text, tab, payload = line.partition("\t")
            if not tab:
                raise FormatError(f"{path}:{lineno}: missing TAB separator")
            try:
                v = np.array([float(x) for x in payload.split(",")])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: unparseable vector: {exc}") from exc
            if d_task is None:
                d_task = v.size
            elif v.size != d_task:
                raise ShapeError(
                    f"{path}:{lineno}: vector dim {v.size} conflicts with declared {d_task}"
                )
            if text in vectors:
                raise DuplicateKeyError(f"{path}:{lineno}: duplicate description {text!r}")
            vectors[text] = v
    if d_task is None:
        raise FormatError(f"{path}: empty embedding table")
    return EmbeddingTable(vectors, d_task)


def save_embedding_table(path, table: EmbeddingTable):
    with open(path, "w", encoding="utf-8") as fh:
        for text, v in table.vectors.items():
            fh.write(text + "\t" + ",".join(repr(float(x)) for x in v) + "\n")
