"""Synthetic speaker world with closed-form conditional distributions.

Given an impression record, the ground-truth embedding is drawn from an
``m``-component Gaussian mixture: every component shares the covariance
``noise**2 * I`` and the components sit at fixed offsets around a mean that
is linear in the (centred) answers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .prompt import ImpressionRecord, ImpressionSchema

SPLITS = ("train", "heldout", "eval")
_SPLIT_CODE = {"train": 1, "heldout": 2, "eval": 3}


@dataclass(frozen=True)
class SynthWorldConfig:
    seed: int = 7
    d: int = 16
    modes: int = 2
    mode_separation: float = 4.5
    noise: float = 0.3
    effect_scale: float = 0.5
    # Questions whose effect vectors have norm focus_effect instead of effect_scale.
    focus_questions: tuple = ("confidence", "expressiveness")
    focus_effect: float = 1.0
    base_norm: float = 2.0
    n_train: int = 2672
    n_heldout: int = 200
    n_eval: int = 30

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.modes > self.d + 1:
            raise ValueError("modes must not exceed d + 1")
        if min(self.noise, self.mode_separation, self.effect_scale, self.focus_effect) < 0:
            raise ValueError("scales must be non-negative")
        if min(self.n_train, self.n_heldout, self.n_eval) < 1:
            raise ValueError("every split needs at least one speaker")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["focus_questions"] = list(self.focus_questions)
        return out


WORLD_PRESETS = {
    "default": SynthWorldConfig(),
    # Attribute information lives only in the questions the frozen encoder
    # nearly erases; unimodal so the mode spread does not mask the effect.
    "lora_stress": SynthWorldConfig(modes=1, mode_separation=0.0, effect_scale=0.0, focus_effect=1.5),
}


def world_preset(name: str, **overrides) -> SynthWorldConfig:
    try:
        base = WORLD_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown world preset {name!r}; known: {sorted(WORLD_PRESETS)}") from None
    return replace(base, **overrides)


class SynthWorld:
    """Closed-form generative model behind a corpus."""

    def __init__(self, config: SynthWorldConfig, schema: ImpressionSchema):
        self.config = config
        self.schema = schema
        rng = np.random.default_rng([config.seed, 100])
        z = rng.standard_normal((len(schema.questions), config.d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        scale = np.array([
            config.focus_effect if q.id in config.focus_questions else config.effect_scale
            for q in schema.questions
        ])
        self.effects = z * scale[:, None]
        base = rng.standard_normal(config.d)
        self.base = config.base_norm * base / np.linalg.norm(base)
        q, _ = np.linalg.qr(rng.standard_normal((config.d, config.d)))
        dirs = q[:, : config.modes].T
        self.mode_offsets = (config.mode_separation / np.sqrt(2.0)) * (dirs - dirs.mean(axis=0))
        self._index = {q.id: i for i, q in enumerate(schema.questions)}

    def conditional_mean(self, record: ImpressionRecord) -> np.ndarray:
        """Mixture mean: base plus the answer-weighted effect vectors."""
        mean = self.base.copy()
        for qid, value in record.answers.items():
            i = self._index[qid]
            mean += (value - self.schema.questions[i].center) * self.effects[i]
        return mean

    def mode_means(self, record: ImpressionRecord) -> np.ndarray:
        return self.conditional_mean(record)[None, :] + self.mode_offsets

    def draw_record(self, speaker_id: str, rng: np.random.Generator) -> ImpressionRecord:
        answers = {q.id: int(rng.choice(q.values)) for q in self.schema.questions}
        return ImpressionRecord(speaker_id, answers)

    def draw_embedding(self, record: ImpressionRecord, rng: np.random.Generator, n: int | None = None):
        """Draw from the conditional mixture; returns ``(embeddings, modes)``."""
        size = 1 if n is None else n
        modes = rng.integers(0, self.config.modes, size=size)
        noise = rng.standard_normal((size, self.config.d)) * self.config.noise
        x = self.mode_means(record)[modes] + noise
        if n is None:
            return x[0], int(modes[0])
        return x, modes


@dataclass
class SynthCorpus:
    config: SynthWorldConfig
    records: dict = field(default_factory=dict)      # split -> list[ImpressionRecord]
    embeddings: dict = field(default_factory=dict)   # split -> (n, d) array
    modes: dict = field(default_factory=dict)        # split -> (n,) int array

    def split(self, name: str):
        return self.records[name], self.embeddings[name]


def generate_corpus(config: SynthWorldConfig, schema: ImpressionSchema) -> SynthCorpus:
    """Draw every split. Each speaker uses its own derived RNG stream."""
    world = SynthWorld(config, schema)
    counts = {"train": config.n_train, "heldout": config.n_heldout, "eval": config.n_eval}
    corpus = SynthCorpus(config)
    for split in SPLITS:
        recs, embs, modes = [], [], []
        for i in range(counts[split]):
            rng = np.random.default_rng([config.seed, _SPLIT_CODE[split], i])
            rec = world.draw_record(f"{split}-{i:05d}", rng)
            x, k = world.draw_embedding(rec, rng)
            recs.append(rec)
            embs.append(x)
            modes.append(k)
        corpus.records[split] = recs
        corpus.embeddings[split] = np.array(embs).reshape(-1, config.d)
        corpus.modes[split] = np.array(modes, dtype=np.int64)
    return corpus


def oracle_conditional_samples(config: SynthWorldConfig, schema: ImpressionSchema, record: ImpressionRecord,
                               n: int, seed: int = 0) -> np.ndarray:
    """Exact draws from the true conditional mixture of ``record``."""
    if n == 0:
        return np.zeros((0, config.d))
    record.validate(schema)
    world = SynthWorld(config, schema)
    x, _ = world.draw_embedding(record, np.random.default_rng([config.seed, 999, seed]), n)
    return x
