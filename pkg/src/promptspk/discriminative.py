"""Deterministic prompt-to-embedding head.

A 4-layer projection network maps the (optionally LoRA-adapted) conditioning
vector to a speaker embedding and is trained on squared L2 distance plus one
minus cosine similarity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mathcore import AdamState, DivergenceError, MlpParams, ShapeError, adam_step, init_mlp, mlp_backward, mlp_forward
from .prompt import FrozenEncoder, LoraAdapter, Prompt, init_lora, lora_apply, lora_backward

log = logging.getLogger(__name__)

PROVENANCES = ("ground_truth", "discriminative", "flow_generated")

# Incremented whenever a zero-norm prediction hits the cosine term.
zero_norm_warnings = 0


@dataclass(frozen=True)
class SpeakerEmbedding:
    values: np.ndarray
    provenance: str = "ground_truth"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding has non-finite entries")


def disc_loss_and_grad(predicted: np.ndarray, target: np.ndarray):
    """Per-row loss ``||p - e||^2 + (1 - cos(p, e))`` and its gradient w.r.t. ``p``.

    Accepts single vectors or ``(n, d)`` batches. A zero-norm prediction
    gets cosine 0 (loss term 1) and a zero cosine gradient.
    """
    global zero_norm_warnings
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    e = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != e.shape or p.shape[-1] == 0:
        raise ShapeError(f"predicted {p.shape} and target {e.shape} must share a non-empty shape")
    e_norm = np.linalg.norm(e, axis=1)
    if np.any(e_norm == 0.0):
        raise ValueError("target embedding has zero norm")
    p_norm = np.linalg.norm(p, axis=1)
    zero = p_norm == 0.0
    if np.any(zero):
        zero_norm_warnings += int(zero.sum())
        log.warning("zero-norm prediction in disc_loss (%d rows)", int(zero.sum()))
    safe_p = np.where(zero, 1.0, p_norm)
    cos = np.where(zero, 0.0, np.sum(p * e, axis=1) / (safe_p * e_norm))
    diff = p - e
    loss = np.sum(diff * diff, axis=1) + (1.0 - cos)
    dcos = e / (safe_p * e_norm)[:, None] - cos[:, None] * p / (safe_p**2)[:, None]
    dcos[zero] = 0.0
    grad = 2.0 * diff - dcos
    if np.ndim(predicted) == 1:
        return float(loss[0]), grad[0]
    return loss, grad


def disc_loss(predicted, target) -> float:
    p = predicted.values if isinstance(predicted, SpeakerEmbedding) else predicted
    e = target.values if isinstance(target, SpeakerEmbedding) else target
    loss, _ = disc_loss_and_grad(np.ravel(p), np.ravel(e))
    return loss


@dataclass
class DiscConfig:
    hidden: int = 256
    n_layers: int = 4
    projection_activation: str = "identity"
    use_lora: bool = True
    lora_rank: int = 8
    lora_alpha: float | None = None
    train_projection: bool = True
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 200
    seed: int = 0
    # Early stopping on a validation split, when one is supplied.
    patience: int = 10


@dataclass
class DiscriminativeModel:
    encoder: FrozenEncoder
    adapter: LoraAdapter
    projection: MlpParams
    val_trace: list = field(default_factory=list)
    best_epoch: int | None = None

    def condition(self, features: np.ndarray) -> np.ndarray:
        return lora_apply(self.encoder, self.adapter, features)

    def predict_features(self, features: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.projection, self.condition(features))
        return out


def init_discriminative(encoder: FrozenEncoder, d: int, config: DiscConfig) -> DiscriminativeModel:
    """Fresh model. Projection and adapter draw from separate seeded streams,
    so the projection init does not depend on ``use_lora``."""
    if config.n_layers < 1:
        raise ValueError("projection needs at least one layer")
    dims = [encoder.out_dim] + [config.hidden] * (config.n_layers - 1) + [d]
    projection = init_mlp(dims, np.random.default_rng([config.seed, 1]), config.projection_activation)
    adapter = init_lora(encoder, np.random.default_rng([config.seed, 2]), config.lora_rank, config.lora_alpha)
    return DiscriminativeModel(encoder, adapter, projection)


def train_discriminative(
    prompts, targets: np.ndarray, encoder: FrozenEncoder, config: DiscConfig,
    model: DiscriminativeModel | None = None, validation=None,
):
    """Minibatch Adam on the combined L2 + cosine objective.

    ``prompts`` may be a list of :class:`Prompt` or a precomputed feature
    matrix. Returns ``(model, trace)`` where ``trace`` holds the mean
    training loss of each epoch.

    With ``validation=(prompts, targets)`` the validation loss is tracked
    after every epoch, training stops after ``config.patience`` epochs
    without improvement, and the best parameters are restored.
    """
    features = _as_features(prompts, encoder)
    targets = np.asarray(targets, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("empty dataset")
    if targets.ndim != 2 or len(targets) != len(features):
        raise ShapeError(f"targets {targets.shape} do not match {len(features)} prompts")
    if model is None:
        model = init_discriminative(encoder, targets.shape[1], config)
    proj_opt = AdamState.for_params(model.projection, lr=config.lr, weight_decay=config.weight_decay)
    lora_opt = AdamState.for_params(model.adapter, lr=config.lr)
    rng = np.random.default_rng([config.seed, 3])
    n = len(features)
    trace = []
    if validation is not None:
        val_features = _as_features(validation[0], encoder)
        val_targets = np.asarray(validation[1], dtype=np.float64)
        best, stale = (np.inf, None), 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            u = features[idx]
            cond = model.condition(u)
            pred, tape = mlp_forward(model.projection, cond)
            loss, g = disc_loss_and_grad(pred, targets[idx])
            if not np.all(np.isfinite(loss)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += float(loss.sum())
            g = g / len(idx)
            p_grads, cond_grad = mlp_backward(model.projection, tape, g, return_input_grad=True)
            if config.use_lora:
                adam_step(lora_opt, model.adapter, lora_backward(model.adapter, u, cond_grad))
            if config.train_projection:
                adam_step(proj_opt, model.projection, p_grads)
        trace.append(total / n)
        if validation is None:
            continue
        val_loss, _ = disc_loss_and_grad(model.predict_features(val_features), val_targets)
        model.val_trace.append(float(val_loss.mean()))
        if model.val_trace[-1] < best[0]:
            best, stale = (model.val_trace[-1], (epoch, model.projection.copy(), model.adapter.copy())), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if validation is not None and best[1] is not None:
        model.best_epoch, model.projection, model.adapter = best[1]
    return model, trace


def predict(prompt: Prompt, model: DiscriminativeModel) -> SpeakerEmbedding:
    return SpeakerEmbedding(model.predict_features(model.encoder.featurize(prompt)), "discriminative")


def _as_features(prompts, encoder: FrozenEncoder) -> np.ndarray:
    if isinstance(prompts, np.ndarray):
        if prompts.ndim != 2 or prompts.shape[1] != encoder.in_dim:
            raise ShapeError(f"feature matrix {prompts.shape} does not match encoder input {encoder.in_dim}")
        return prompts
    return encoder.featurize_many(list(prompts))
