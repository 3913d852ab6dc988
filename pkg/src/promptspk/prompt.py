"""Impression records, slot-filled prompts, and the frozen prompt encoder with
its low-rank adapter.

The prompt encoder is a stand-in for a pre-trained language model: every
phrase is hashed to a fixed random vector, a prompt is featurised as the mean
of its phrase vectors, and one frozen affine layer maps that mean to the
conditioning vector. A rank-``r`` LoRA adapter sits on that frozen layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .mathcore import ShapeError

KINDS = {"binary": (0, 1), "five_point": (1, 2, 3, 4, 5)}
SLOTS = ("voice", "delivery")


@dataclass(frozen=True)
class Question:
    id: str
    kind: str
    slot: str
    phrases: dict

    @property
    def values(self) -> tuple:
        return KINDS[self.kind]

    @property
    def center(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class ImpressionSchema:
    questions: tuple
    template: str
    version: str = ""

    def __post_init__(self):
        if len(self.questions) != 26:
            raise ValueError(f"schema must hold 26 questions, got {len(self.questions)}")
        ids = [q.id for q in self.questions]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate question ids")
        for q in self.questions:
            if q.kind not in KINDS:
                raise ValueError(f"{q.id}: unknown kind {q.kind!r}")
            if q.slot not in SLOTS:
                raise ValueError(f"{q.id}: unknown slot {q.slot!r}")
            if set(q.phrases) != set(q.values):
                raise ValueError(f"{q.id}: phrase table must cover exactly {q.values}")
            texts = list(q.phrases.values())
            if any(not p for p in texts) or len(set(texts)) != len(texts):
                raise ValueError(f"{q.id}: phrases must be non-empty and unique")

    @classmethod
    def from_dict(cls, doc: dict) -> "ImpressionSchema":
        qs = tuple(
            Question(q["id"], q["kind"], q["slot"], {int(k): v for k, v in q["phrases"].items()})
            for q in doc["questions"]
        )
        return cls(qs, doc["template"], doc.get("version", ""))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "template": self.template,
            "questions": [
                {"id": q.id, "kind": q.kind, "slot": q.slot,
                 "phrases": {str(k): v for k, v in q.phrases.items()}}
                for q in self.questions
            ],
        }

    @property
    def ids(self) -> list[str]:
        return [q.id for q in self.questions]

    def question(self, qid: str) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise KeyError(f"unknown question id {qid!r}")


def load_schema(path: str | Path | None = None) -> ImpressionSchema:
    """Load a schema document; the packaged English phrase table by default."""
    if path is None:
        text = resources.files("promptspk").joinpath("data/impression_schema.json").read_text()
    else:
        text = Path(path).read_text()
    return ImpressionSchema.from_dict(json.loads(text))


@dataclass(frozen=True)
class ImpressionRecord:
    speaker_id: str
    answers: dict = field(hash=False)

    def validate(self, schema: ImpressionSchema) -> None:
        for qid, value in self.answers.items():
            q = schema.question(qid)
            if value not in q.values:
                raise ValueError(f"{self.speaker_id}: answer {value!r} to {qid!r} outside {q.values}")

    def to_json(self) -> str:
        return json.dumps({"speaker_id": self.speaker_id, "answers": self.answers})

    @classmethod
    def from_json(cls, line: str) -> "ImpressionRecord":
        doc = json.loads(line)
        return cls(str(doc["speaker_id"]), {str(k): int(v) for k, v in doc["answers"].items()})


def write_records(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str | Path) -> list[ImpressionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ImpressionRecord.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class Prompt:
    phrases: tuple
    text: str


def render(schema: ImpressionSchema, slot1: list[str], slot2: list[str]) -> str:
    return schema.template.format(slot1=", ".join(slot1), slot2=", ".join(slot2))


def build_prompt(schema: ImpressionSchema, record: ImpressionRecord, include=None) -> Prompt:
    """Slot-fill the template with one phrase per included question.

    ``include`` defaults to every answered question. Phrases appear in
    schema order; voice-quality phrases go to the first slot and delivery
    phrases to the second.
    """
    record.validate(schema)
    include = set(record.answers) if include is None else set(include)
    unknown = include - set(schema.ids)
    if unknown:
        raise KeyError(f"unknown question ids: {sorted(unknown)}")
    missing = include - set(record.answers)
    if missing:
        raise ValueError(f"questions not answered by {record.speaker_id}: {sorted(missing)}")
    phrases, slots = [], {"voice": [], "delivery": []}
    for q in schema.questions:
        if q.id in include:
            p = q.phrases[record.answers[q.id]]
            phrases.append(p)
            slots[q.slot].append(p)
    return Prompt(tuple(phrases), render(schema, slots["voice"], slots["delivery"]))


def subset_prompt(schema: ImpressionSchema, record: ImpressionRecord, portion: float, seed: int) -> list[str]:
    """Seeded question subset of size ``ceil(portion * answered)``.

    The answered ids are shuffled once per seed and a prefix is taken, so
    smaller portions are always nested inside larger ones.
    """
    if not 0.0 < portion <= 1.0:
        raise ValueError(f"portion must lie in (0, 1], got {portion}")
    answered = [qid for qid in schema.ids if qid in record.answers]
    if portion == 1.0:
        return answered
    k = math.ceil(round(portion * len(answered), 9))
    order = np.random.default_rng(seed).permutation(len(answered))
    chosen = set(order[:k].tolist())
    return [qid for i, qid in enumerate(answered) if i in chosen]


# -- frozen encoder ---------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 1234
    hash_dim: int = 128
    out_dim: int = 64
    # Questions whose answer information the frozen layer nearly erases.
    damped_questions: tuple = ("confidence", "expressiveness")
    damping: float = 1e-3


def phrase_vector(phrase: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(phrase.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([seed, key]).standard_normal(dim)


class FrozenEncoder:
    """Seeded phrase-hash featuriser followed by one frozen affine layer."""

    def __init__(self, config: EncoderConfig, schema: ImpressionSchema):
        if config.hash_dim < 1 or config.out_dim < 1:
            raise ShapeError("encoder dimensions must be positive")
        self.config = config
        self.schema = schema
        self._cache: dict[str, np.ndarray] = {}
        rng = np.random.default_rng([config.seed, 0])
        weight = rng.normal(0.0, 1.0 / np.sqrt(config.hash_dim), size=(config.out_dim, config.hash_dim))
        if config.damped_questions:
            directions = []
            for qid in config.damped_questions:
                vecs = np.array([self.phrase_vec(p) for p in schema.question(qid).phrases.values()])
                directions.append(vecs - vecs.mean(axis=0))
            basis, sv, _ = np.linalg.svd(np.vstack(directions).T, full_matrices=False)
            basis = basis[:, sv > 1e-9 * sv[0]]
            weight = weight - (1.0 - config.damping) * (weight @ basis) @ basis.T
        self.weight = weight
        self.bias = rng.normal(0.0, 0.1, size=config.out_dim)
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    @property
    def in_dim(self) -> int:
        return self.config.hash_dim

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def phrase_vec(self, phrase: str) -> np.ndarray:
        v = self._cache.get(phrase)
        if v is None:
            v = phrase_vector(phrase, self.config.seed, self.config.hash_dim)
            self._cache[phrase] = v
        return v

    def featurize(self, prompt: Prompt) -> np.ndarray:
        """Mean phrase vector (zeros for an empty prompt)."""
        if not prompt.phrases:
            return np.zeros(self.config.hash_dim)
        return np.mean([self.phrase_vec(p) for p in prompt.phrases], axis=0)

    def featurize_many(self, prompts) -> np.ndarray:
        return np.array([self.featurize(p) for p in prompts]).reshape(-1, self.config.hash_dim)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias


def frozen_encode(prompt: Prompt, encoder: FrozenEncoder) -> np.ndarray:
    return encoder.apply(encoder.featurize(prompt))


# -- LoRA -------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / rank) * B @ A`` on the frozen layer."""

    a: np.ndarray  # (rank, in_dim)
    b: np.ndarray  # (out_dim, rank)
    alpha: float

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"adapter shapes A{self.a.shape} / B{self.b.shape} do not chain")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def arrays(self) -> list[np.ndarray]:
        return [self.a, self.b]

    def zeros_like(self) -> "LoraAdapter":
        return LoraAdapter(np.zeros_like(self.a), np.zeros_like(self.b), self.alpha)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.alpha)

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)


def init_lora(encoder: FrozenEncoder, rng: np.random.Generator, rank: int = 8, alpha: float | None = None) -> LoraAdapter:
    """Gaussian ``A``, all-zero ``B``; alpha defaults to the rank (scaling 1)."""
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    a = rng.normal(0.0, 1.0 / np.sqrt(encoder.in_dim), size=(rank, encoder.in_dim))
    b = np.zeros((encoder.out_dim, rank))
    return LoraAdapter(a, b, float(rank if alpha is None else alpha))


def _check_adapter(encoder: FrozenEncoder, adapter: LoraAdapter) -> None:
    if adapter.a.shape[1] != encoder.in_dim or adapter.b.shape[0] != encoder.out_dim:
        raise ShapeError(
            f"adapter A{adapter.a.shape}/B{adapter.b.shape} does not fit frozen layer "
            f"{encoder.out_dim}x{encoder.in_dim}"
        )


def lora_apply(encoder: FrozenEncoder, adapter: LoraAdapter, features: np.ndarray) -> np.ndarray:
    """Adapted layer output for a feature vector or a batch of them."""
    _check_adapter(encoder, adapter)
    return encoder.apply(features) + adapter.scaling * ((features @ adapter.a.T) @ adapter.b.T)


def lora_backward(adapter: LoraAdapter, features: np.ndarray, out_grad: np.ndarray) -> LoraAdapter:
    """Gradient of ``sum(out * out_grad)`` w.r.t. the adapter (frozen weights get none)."""
    u = np.atleast_2d(features)
    g = np.atleast_2d(out_grad)
    s = adapter.scaling
    grads = adapter.zeros_like()
    grads.b[...] = s * g.T @ (u @ adapter.a.T)
    grads.a[...] = s * (g @ adapter.b).T @ u
    return grads


def lora_encode(prompt: Prompt, encoder: FrozenEncoder, adapter: LoraAdapter) -> np.ndarray:
    return lora_apply(encoder, adapter, encoder.featurize(prompt))
