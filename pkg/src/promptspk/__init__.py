"""Prompt-conditioned speaker embedding generation with flow matching."""

from .discriminative import DiscConfig, DiscriminativeModel, SpeakerEmbedding, disc_loss, predict, train_discriminative
from .flow import FlowConfig, FlowModel, cfm_loss, integrate, ot_path_point, sample_ot_path, train_flow
from .mathcore import DivergenceError, ShapeError, TapeError
from .metrics import cosine_similarity, emd_1d, fad_score, fit_gaussian, frechet_distance, spearman_srcc
from .prompt import (EncoderConfig, FrozenEncoder, ImpressionRecord, ImpressionSchema, Prompt, build_prompt,
                     frozen_encode, init_lora, load_schema, lora_encode, subset_prompt)
from .synthdata import SynthWorldConfig, generate_corpus, oracle_conditional_samples, world_preset
from .systems import SYSTEMS, RunConfig, TrainedSystem, train_system

__version__ = "0.1.0"
