"""The four prompt-to-speaker systems and the evaluation protocols run on them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .discriminative import DiscConfig, DiscriminativeModel, train_discriminative
from .flow import FlowConfig, FlowModel, train_flow
from .metrics import cosine_rows, fad_score
from .prompt import EncoderConfig, FrozenEncoder, ImpressionSchema, build_prompt, load_schema, subset_prompt
from .synthdata import SynthCorpus, SynthWorldConfig

log = logging.getLogger(__name__)

SYSTEMS = ("disc_nolora", "disc_lora", "flow_lora", "disc_plus_flow")
GENERATIVE = ("flow_lora", "disc_plus_flow")
ABLATION_PORTIONS = (1 / 3, 2 / 3, 1.0)


@dataclass
class RunConfig:
    world: SynthWorldConfig = field(default_factory=SynthWorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)


@dataclass
class TrainedSystem:
    name: str
    encoder: FrozenEncoder
    disc: DiscriminativeModel | None = None
    flow: FlowModel | None = None
    traces: dict = field(default_factory=dict)

    @property
    def generative(self) -> bool:
        return self.name in GENERATIVE

    @property
    def d(self) -> int:
        if self.flow is not None:
            return self.flow.net.d
        return self.disc.projection.out_dim

    def generate(self, features: np.ndarray, n: int = 1, seed: int = 0) -> np.ndarray:
        """Embeddings for each feature row.

        Discriminative systems return one row per prompt whatever ``n`` is;
        flow systems return ``n`` rows per prompt, drawn from a noise stream
        seeded by ``(seed, prompt index)``.
        """
        features = np.atleast_2d(features)
        if not self.generative:
            return self.disc.predict_features(features)
        out = []
        for i, u in enumerate(features):
            x0 = np.random.default_rng([seed, i]).standard_normal((n, self.d))
            out.append(self.flow.sample(u, x0))
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.d))


def corpus_features(encoder: FrozenEncoder, schema: ImpressionSchema, records, include_fn=None) -> np.ndarray:
    prompts = [build_prompt(schema, r, None if include_fn is None else include_fn(r)) for r in records]
    return encoder.featurize_many(prompts)


def train_system(name: str, corpus: SynthCorpus, config: RunConfig, schema: ImpressionSchema | None = None) -> TrainedSystem:
    """Train one of :data:`SYSTEMS` on the corpus train split."""
    if name not in SYSTEMS:
        raise ValueError(f"unknown system {name!r}; expected one of {SYSTEMS}")
    schema = schema or load_schema()
    encoder = FrozenEncoder(config.encoder, schema)
    records, targets = corpus.split("train")
    features = corpus_features(encoder, schema, records)
    val_records, val_targets = corpus.split("heldout")
    validation = (corpus_features(encoder, schema, val_records), val_targets)
    system = TrainedSystem(name, encoder)
    if name in ("disc_nolora", "disc_lora", "disc_plus_flow"):
        dcfg = replace(config.disc, use_lora=(name != "disc_nolora"))
        log.info("training discriminative head (%s)", name)
        system.disc, system.traces["disc"] = train_discriminative(features, targets, encoder, dcfg,
                                                                              validation=validation)
    if name == "flow_lora":
        log.info("training flow head (prompt conditioned)")
        system.flow, system.traces["flow"] = train_flow(features, targets, encoder, config.flow,
                                                                "prompt_conditioned", validation=validation)
    elif name == "disc_plus_flow":
        log.info("training flow head (two stage)")
        system.flow, system.traces["flow"] = train_flow(features, targets, encoder, config.flow, "two_stage",
                                                                system.disc, validation=validation)
    return system


def fad_against(system: TrainedSystem, background: np.ndarray, features: np.ndarray, n: int, seed: int = 0) -> float:
    return fad_score(background, system.generate(features, n, seed))


def ablation_similarity(system: TrainedSystem, schema: ImpressionSchema, records, targets: np.ndarray,
                        portions=ABLATION_PORTIONS, seeds=(0, 1, 2), n: int = 10) -> list[float]:
    """Mean cosine similarity between generated and ground-truth embeddings
    when only a portion of each prompt is kept, averaged over speakers,
    subset seeds and (for flow systems) ``n`` draws."""
    means = []
    for portion in portions:
        sims = []
        for seed in seeds:
            prompts = [build_prompt(schema, r, subset_prompt(schema, r, portion, [seed, i]))
                       for i, r in enumerate(records)]
            feats = system.encoder.featurize_many(prompts)
            gen = system.generate(feats, n, seed=seed)
            reps = len(gen) // len(records)
            sims.append(cosine_rows(gen, np.repeat(targets, reps, axis=0)).mean())
        means.append(float(np.mean(sims)))
    return means
