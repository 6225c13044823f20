"""Domain types, seeded randomness and small matrix helpers shared by every module."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

FeatureMatrix = np.ndarray


def feature_matrix(data) -> FeatureMatrix:
    """Validate ``data`` as an L x D float64 matrix and return a read-only copy."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"feature matrix must be 2-D with L, D >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature matrix has non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if len(self.tokens) < 1:
            raise ValueError("token sequence must be non-empty")
        if any(t < 0 or t >= self.vocab_size for t in self.tokens):
            raise ValueError(f"token id out of range for vocab of size {self.vocab_size}")

    def __len__(self):
        return len(self.tokens)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


class Category(str, enum.Enum):
    ATTRIBUTE = "Attribute"
    LAYOUT = "Layout"
    SEMANTIC_RELATION = "SemanticRelation"
    COMPLEX = "Complex"


class FactKind(str, enum.Enum):
    OBJECT_PRESENCE = "ObjectPresence"
    ATTRIBUTE_BINDING = "AttributeBinding"
    COUNT = "Count"
    SPATIAL_RELATION = "SpatialRelation"
    SEMANTIC_RELATION = "SemanticRelation"


Payload = Union[None, int, tuple[int, int]]


class Fact(NamedTuple):
    """An atomic, checkable statement about a scene.

    ``payload`` is ``None`` for presence, an attribute id for bindings, an
    integer 1..9 for counts and ``(relation_id, object_class)`` for relations.
    """

    kind: FactKind
    subject: int
    payload: Payload = None

    @property
    def is_relation(self) -> bool:
        return self.kind in (FactKind.SPATIAL_RELATION, FactKind.SEMANTIC_RELATION)

    def validate(self):
        k, p = self.kind, self.payload
        if k is FactKind.OBJECT_PRESENCE and p is not None:
            raise ValueError("presence facts carry no payload")
        if k is FactKind.ATTRIBUTE_BINDING and not isinstance(p, int):
            raise ValueError("attribute binding payload must be an attribute id")
        if k is FactKind.COUNT and not (isinstance(p, int) and 1 <= p <= 9):
            raise ValueError("count payload must be an integer in 1..9")
        if self.is_relation and not (isinstance(p, tuple) and len(p) == 2):
            raise ValueError("relation payload must be (relation_id, object_class)")
        return self

    def to_json(self) -> dict:
        payload = list(self.payload) if isinstance(self.payload, tuple) else self.payload
        return {"kind": self.kind.value, "subject": self.subject, "payload": payload}

    @classmethod
    def from_json(cls, d: dict) -> "Fact":
        payload = d.get("payload")
        if isinstance(payload, list):
            payload = tuple(int(v) for v in payload)
        return cls(FactKind(d["kind"]), int(d["subject"]), payload).validate()


def fact_sort_key(f: Fact):
    p = f.payload
    if p is None:
        p = ()
    elif isinstance(p, int):
        p = (p,)
    return (list(FactKind).index(f.kind), f.subject, p)


@dataclass(frozen=True)
class Scene:
    """The decoded symbolic "image": a set of facts."""

    facts: frozenset[Fact] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "facts", frozenset(self.facts))

    def __contains__(self, fact: Fact) -> bool:
        return fact in self.facts

    def __len__(self):
        return len(self.facts)

    def sorted_facts(self) -> list[Fact]:
        return sorted(self.facts, key=fact_sort_key)

    def to_json(self) -> list[dict]:
        return [f.to_json() for f in self.sorted_facts()]


@dataclass(frozen=True)
class PromptSpec:
    id: str
    category: Category
    facts: tuple[Fact, ...]
    text: str

    def __post_init__(self):
        if not self.facts:
            raise ValueError("prompt must contain at least one fact")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "category": self.category.value,
            "facts": [f.to_json() for f in self.facts],
            "text": self.text,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PromptSpec":
        return cls(
            id=d["id"],
            category=Category(d["category"]),
            facts=tuple(Fact.from_json(f) for f in d["facts"]),
            text=d["text"],
        )


@dataclass(frozen=True)
class Question:
    fact: Fact
    text: str

    def to_json(self) -> dict:
        return {"fact": self.fact.to_json(), "text": self.text}

    @classmethod
    def from_json(cls, d: dict) -> "Question":
        return cls(Fact.from_json(d["fact"]), d["text"])


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("rng keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Rng:
    """Splittable, counter-based random source.

    A stream is identified by ``(seed, path)``; ``split`` extends the path, so
    children never depend on how much any sibling has consumed.
    """

    seed: int
    path: tuple[int, ...] = ()

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def frobenius_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Frobenius distance over the last two axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return np.sum(d * d, axis=(-2, -1))


def average_rows(h: np.ndarray) -> np.ndarray:
    return np.mean(np.asarray(h, dtype=np.float64), axis=-2)


def max_rows(h: np.ndarray) -> np.ndarray:
    return np.max(np.asarray(h, dtype=np.float64), axis=-2)


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sample_var(x, axis: int = 0, ddof: int = 0) -> np.ndarray:
    """Variance along ``axis``, shifted by the first sample so identical samples give exactly 0."""
    x = np.asarray(x, dtype=np.float64)
    first = np.take(x, [0], axis=axis)
    return np.var(x - first, axis=axis, ddof=ddof)
